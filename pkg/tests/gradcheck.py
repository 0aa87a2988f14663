"""Finite-difference gradient cases shared by the unit tests and the acceptance suite.

Every ``*_case(seed)`` returns ``(analytic, numeric)`` gradients of one
random scalar objective in float64.
"""

import numpy as np

from multigran.encoder import EncoderConfig, ImageFeatureSet, explain, explain_backward
from multigran.inversion import InversionConfig, inversion_objective
from multigran.numerics import finite_diff_grad, make_rng
from multigran.scenes import default_vocab
from multigran.vlm import ModelConfig, Projector, VisionLanguageModel, cross_entropy, encode_packed, init_params


CASES = 20


def _features(rng, grid=4, dim=8):
    cfg = EncoderConfig(image_side=grid * 2, patch_size=2, embed_dim=dim, layers=1, heads=2)
    keys = rng.normal(size=(grid, grid, dim))
    return ImageFeatureSet(cls=rng.normal(size=dim), patches=rng.normal(size=(grid, grid, dim)), keys=keys, config=cfg)


def explain_case(seed):
    rng = make_rng(seed)
    f = _features(rng)
    q = rng.normal(size=8)
    up = rng.normal(size=(4, 4))

    def loss(v):
        return float((explain(f, v).weights * up).sum())

    return explain_backward(f, q, up), finite_diff_grad(loss, q)


def inversion_case(seed):
    rng = make_rng(seed)
    keys = rng.normal(size=(16, 8))
    t = rng.random((1, 16)) * (rng.random((1, 16)) < 0.5)
    t = t / t.sum() if t.sum() else np.full((1, 16), 1 / 16)
    q0 = rng.normal(size=(1, 8))
    q = q0 + 0.5 * rng.normal(size=(1, 8))
    cfg = InversionConfig(loss="cross_entropy" if seed % 2 == 0 else "mse", reg_weight=0.05)
    _, g = inversion_objective(keys, q, t, q0, cfg)
    num = finite_diff_grad(lambda v: float(inversion_objective(keys, v, t, q0, cfg)[0].sum()), q)
    return g, num


def projector_case(seed):
    rng = make_rng(seed)
    cfg = ModelConfig(vocab_size=4, visual_dim=5, model_dim=6, projector_hidden=7, layers=1, heads=2, seed=seed)
    params = {k: v for k, v in init_params(cfg).items() if k.startswith("proj.")}
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    x = rng.normal(size=(2, 3, 5))
    up = rng.normal(size=(2, 3, 6))
    proj = Projector(params)
    y, cache = proj.forward(x)
    dx, grads = proj.backward(up, cache)
    analytic = [dx.reshape(-1)] + [grads[k].reshape(-1) for k in sorted(grads)]

    def loss_x(v):
        return float((proj(v) * up).sum())

    numeric = [finite_diff_grad(loss_x, x).reshape(-1)]
    for k in sorted(grads):
        def loss_p(v, k=k):
            old = params[k]
            params[k] = v
            try:
                return float((proj(x) * up).sum())
            finally:
                params[k] = old

        numeric.append(finite_diff_grad(loss_p, params[k].copy()).reshape(-1))
    return np.concatenate(analytic), np.concatenate(numeric)


def decoder_case(seed, coords=40):
    """Decoder CE loss on a packed batch; a random subset of coordinates is checked."""
    rng = make_rng(seed)
    vocab = default_vocab()
    cfg = ModelConfig(vocab_size=len(vocab), visual_dim=6, model_dim=8, projector_hidden=8, layers=2, heads=2, context=64, seed=seed)
    model = VisionLanguageModel(cfg, vocab)
    for k in model.params:
        if k.endswith(("_b", "bqkv", "bo", "b1", "b2", "head_b")):
            model.params[k] += 0.1 * rng.normal(size=model.params[k].shape)
    visual = rng.normal(size=(2, 3, 6))
    groups = [
        [((4, 5), (16,)), ((6,), (17, 7))],
        [((8, 9, 10), (18,))],
    ]
    batch = encode_packed(groups, vocab)
    _, grads = model.loss_and_grads(visual, batch)
    names = sorted(grads)
    analytic, numeric = [], []
    for _ in range(coords):
        k = names[int(rng.integers(len(names)))]
        if k == "dec.embed":
            # rows of tokens that actually occur carry gradient
            row = int(rng.choice(np.unique(batch.text)))
            idx = (row, int(rng.integers(cfg.model_dim)))
        else:
            idx = tuple(int(rng.integers(n)) for n in model.params[k].shape)
        p = model.params[k]
        old = p[idx]

        def f(v):
            p[idx] = v[0]
            return model.loss_and_grads(visual, batch, need_grads=False)[0]

        numeric.append(finite_diff_grad(f, np.array([old]))[0])
        p[idx] = old
        analytic.append(grads[k][idx])
    return np.array(analytic), np.array(numeric)


def visual_input_case(seed):
    """Gradient of the decoder loss with respect to the raw visual tokens."""
    rng = make_rng(seed)
    vocab = default_vocab()
    cfg = ModelConfig(vocab_size=len(vocab), visual_dim=4, model_dim=8, projector_hidden=8, layers=1, heads=2, context=32, seed=seed)
    model = VisionLanguageModel(cfg, vocab)
    visual = rng.normal(size=(1, 3, 4))
    batch = encode_packed([[((4, 5), (16,))]], vocab)
    hv, c_proj = model.projector.forward(visual)

    logits, c_dec = model.decoder.forward(hv, batch)
    _, dlogits = cross_entropy(logits, batch.targets)
    dhv, _ = model.decoder.backward(dlogits, c_dec)
    dx, _ = model.projector.backward(dhv, c_proj)
    num = finite_diff_grad(lambda v: model.loss_and_grads(v, batch, need_grads=False)[0], visual)
    return dx, num
