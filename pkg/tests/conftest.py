import numpy as np
import pytest

from dqlr import tensor as T


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, k, stride=1, padding=0):
    """Quadruple-loop cross-correlation; x [C,H,W], k [O,C,kh,kw]."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ic, i * stride + a, j * stride + b] * k[oc, ic, a, b]
                out[oc, i, j] = acc
    return out


def naive_conv_transpose2d(x, k, stride=1, padding=0):
    """Scatter-add loop; x [C,H,W], k [C,O,kh,kw]."""
    c, h, w = x.shape
    _, o, kh, kw = k.shape
    full = np.zeros((o, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for ic in range(c):
        for i in range(h):
            for j in range(w):
                for oc in range(o):
                    for a in range(kh):
                        for b in range(kw):
                            full[oc, i * stride + a, j * stride + b] += x[ic, i, j] * k[ic, oc, a, b]
    ho, wo = full.shape[1] - 2 * padding, full.shape[2] - 2 * padding
    return full[:, padding : padding + ho, padding : padding + wo]


def naive_ssim(a, b, window, c1, c2):
    """Direct per-position weighted moments over every valid window placement."""
    s = window.shape[0]
    h, w = a.shape
    vals = []
    for i in range(h - s + 1):
        for j in range(w - s + 1):
            pa = a[i : i + s, j : j + s]
            pb = b[i : i + s, j : j + s]
            ma = float((window * pa).sum())
            mb = float((window * pb).sum())
            va = float((window * (pa - ma) ** 2).sum())
            vb = float((window * (pb - mb) ** 2).sum())
            cov = float((window * (pa - ma) * (pb - mb)).sum())
            lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1)
            struct = (2 * cov + c2) / (va + vb + c2)
            vals.append(lum * struct)
    return float(np.mean(vals))


def e2e_toy(seed=0, image_size=16):
    """Full encode/propagate/quantize/generate/loss graph over one flat parameter vector.

    Returns ``(frozen, real, point)``. ``real`` uses :func:`quantize` and
    :func:`vq_loss` as training does. Stop-gradients make its backward differ
    from the derivative of its value, so ``frozen`` replaces every stopped
    quantity (the straight-through offset ``y_q - y``, ``sg[y]`` and ``sg[y_q]``)
    with its value at ``point``. Both share gradients at ``point``; only
    ``frozen`` can be checked against finite differences.
    """
    from dqlr.losses import LossConfig, mse_loss, ssim_loss, total_loss
    from dqlr.models import ModelConfig, encode_batch, generate_batch, init_params, propagate
    from dqlr.quantizer import Codebook, lookup, quantize
    from dqlr.tensor import Tensor

    cfg = ModelConfig(latent_dim=4, channels=(2, 3))
    loss_cfg = LossConfig()
    rng = np.random.default_rng(seed + 100)
    image = rng.uniform(0.05, 0.95, size=(1, 1, image_size, image_size))
    with T.precision(64):
        params = init_params(cfg, seed)
        names = list(params)
        shapes = [params[n].shape for n in names]
        codes0 = rng.normal(0.0, 0.5, size=(6, cfg.latent_dim))
        x = encode_batch(Tensor(image), params, cfg)
        y0 = propagate([x[0]], params, cfg, h0_seed=seed)[0]
        _, idx = quantize(y0, Codebook.from_array(codes0))
        yq0 = np.moveaxis(codes0[idx], -1, 0)
        point = np.concatenate([params[n].data.ravel() for n in names] + [codes0.ravel()])
    sites = idx.size

    def relu_margin():
        """Smallest |pre-activation| feeding any relu at ``point``."""
        with T.precision(64), T.no_grad():
            pre, out = [], Tensor(image)
            for i in range(cfg.depth):
                out = T.conv2d(out, params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"], 2, 1)
                if i < cfg.depth - 1:
                    pre.append(out.data)
                    out = T.relu(out)
            out = Tensor(yq0[None])
            for i in range(cfg.depth - 1):
                out = T.conv_transpose2d(out, params[f"generator.{i}.weight"], params[f"generator.{i}.bias"], 2, 1)
                pre.append(out.data)
                out = T.relu(out)
            return float(min(np.abs(a).min() for a in pre))

    def unpack(vec):
        p, off = {}, 0
        for n, shp in zip(names, shapes):
            size = int(np.prod(shp))
            p[n] = T.reshape(vec[off : off + size], shp)
            off += size
        codes = T.reshape(vec[off:], codes0.shape)
        x = encode_batch(Tensor(image), p, cfg)
        y = propagate([x[0]], p, cfg, h0_seed=seed)[0]
        return p, codes, y

    def real(vec):
        p, codes, y = unpack(vec)
        cb = Codebook(codes=codes, usage=np.zeros(len(codes0), dtype=np.int64))
        y_st, got = quantize(y, cb)
        assert np.array_equal(got, idx), "assignment moved away from the base point"
        recon = generate_batch(T.reshape(y_st, (1,) + y.shape), p, cfg)
        total, _ = total_loss(recon, Tensor(image), y, lookup(cb, idx), loss_cfg)
        return total

    def frozen(vec):
        p, codes, y = unpack(vec)
        y_code = lookup(Codebook(codes=codes, usage=np.zeros(len(codes0), dtype=np.int64)), idx)
        recon = generate_batch(T.reshape(y + Tensor(yq0 - y0.data), (1,) + y.shape), p, cfg)
        book = Tensor(y0.data) - y_code
        commit = y - Tensor(yq0)
        quant = (T.sum(book * book) + loss_cfg.beta * T.sum(commit * commit)) * (1.0 / sites)
        return (
            mse_loss(recon, Tensor(image), loss_cfg.patch_size)
            + loss_cfg.lambda_s * ssim_loss(recon, Tensor(image), loss_cfg)
            + loss_cfg.lambda_q * quant
        )

    frozen.relu_margin = relu_margin
    return frozen, real, point


def analytic_grad(f, point):
    from dqlr.tensor import Tensor

    with T.precision(64):
        x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
        T.backward(f(x))
        return x.grad


def kink_free_toy(margin=2e-3, start=0):
    """First toy seed whose relu pre-activations all clear ``margin``.

    Central differences with eps 1e-3 are meaningless across a relu kink; the
    margin keeps every perturbed evaluation on the differentiated branch.
    """
    for seed in range(start, start + 500):
        frozen, real, point = e2e_toy(seed)
        if frozen.relu_margin() >= margin:
            return seed, frozen, real, point
    raise RuntimeError("no kink-free toy found")


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
