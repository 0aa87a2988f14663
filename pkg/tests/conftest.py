import pytest
from hypothesis import HealthCheck, settings

from multigran.encoder import EncoderConfig, get_encoder
from multigran.numerics import make_rng
from multigran.scenes import SceneSpec, render_scene

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_encoder_cfg():
    return EncoderConfig(image_side=24, patch_size=4, embed_dim=16, layers=1, heads=2, seed=3)


@pytest.fixture(scope="session")
def scene():
    return render_scene(SceneSpec(), make_rng(11), scene_id=7)


@pytest.fixture(scope="session")
def features(scene):
    return get_encoder(EncoderConfig()).encode(scene.image)


@pytest.fixture(scope="session")
def small_features(small_encoder_cfg):
    rng = make_rng(5)
    img = rng.random((24, 24, 3))
    return get_encoder(small_encoder_cfg).encode(img)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        props = dict(report.user_properties)
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", props.get("summary", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, summary = _ACCEPTANCE[name]
        label = name.removeprefix("test_criterion_")
        terminalreporter.write_line(f"[{status}] {label}: {summary}")
