"""ReLU MLP on top of the tetrahedral encoder: queries, signs, training.

The composed field f(u) = mlp(encode(u)) is continuous piecewise affine, so
exact analytic gradients exist almost everywhere. Training minimizes an L1
fit to signed-distance targets plus an eikonal penalty on the gradient norm,
with hand-derived gradients for both terms (the eikonal term needs the
gradient of a Jacobian-vector product, computed by a forward tangent pass
against the reverse-mode vectors).

Convention: ReLU subgradient at exactly zero takes the inactive branch
(derivative 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    EncoderParams,
    accumulate_feature_grads,
    encode,
    interpolation_data,
)
from .tetgrid import C_UNIT_INV, GridConfig


class TrainingError(RuntimeError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]   # layer i: (out_i, in_i)
    biases: list[np.ndarray]

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def n_hidden(self) -> int:
        return sum(self.hidden_widths)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def neuron_index(self, layer: int, k: int) -> int:
        """Flat index of neuron k (0-based) of hidden layer `layer` (1-based)."""
        return sum(self.hidden_widths[: layer - 1]) + k


def init_mlp(in_dim: int, hidden=(12, 12, 12), seed: int = 0) -> MlpParams:
    rng = np.random.default_rng(seed)
    widths = [in_dim, *hidden, 1]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        std = np.sqrt(2.0 / fan_in) if i < len(widths) - 2 else np.sqrt(1.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(widths[i + 1], widths[i])))
        biases.append(np.zeros(widths[i + 1]))
    return MlpParams(weights, biases)


def forward(z: np.ndarray, mlp: MlpParams):
    """Field value and per-layer hidden pre-activations.

    z: (B, in) or (in,). Returns (f, [preact_1, ...]) with f shaped (B,)
    or scalar.
    """
    single = np.asarray(z).ndim == 1
    h = np.atleast_2d(np.asarray(z, dtype=float))
    preacts = []
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        p = h @ w.T + b
        preacts.append(p)
        h = np.maximum(p, 0.0)
    f = (h @ mlp.weights[-1].T + mlp.biases[-1])[:, 0]
    if single:
        return float(f[0]), [p[0] for p in preacts]
    return f, preacts


def field_batch(u: np.ndarray, mlp: MlpParams, enc: EncoderParams):
    """(f, concatenated hidden preacts) straight from input points."""
    z = encode(np.atleast_2d(u), enc)
    f, preacts = forward(z, mlp)
    return f, np.concatenate(preacts, axis=1) if preacts else np.zeros((len(z), 0))


def field_values(u: np.ndarray, mlp: MlpParams, enc: EncoderParams) -> np.ndarray:
    """Field values only; the low-overhead path for dense lattice sweeps."""
    h = encode(np.atleast_2d(u), enc)
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        h = h @ w.T
        h += b
        np.maximum(h, 0.0, out=h)
    return (h @ mlp.weights[-1].T + mlp.biases[-1])[:, 0]


def sign_vector(preacts: np.ndarray, eps_s: float, upto: int | None = None) -> np.ndarray:
    """Ternary codes (+1/0/-1), layer-major neuron-minor, optional prefix."""
    p = np.asarray(preacts)
    if upto is not None:
        p = p[..., :upto]
    out = np.zeros(p.shape, dtype=np.int8)
    out[p > eps_s] = 1
    out[p < -eps_s] = -1
    return out


def pack_signs(signs: np.ndarray) -> bytes:
    """2 bits per ternary entry: 0 -> 00, +1 -> 01, -1 -> 10."""
    s = np.asarray(signs, dtype=np.int8).ravel()
    codes = np.where(s > 0, 1, np.where(s < 0, 2, 0)).astype(np.uint8)
    pad = (-len(codes)) % 4
    codes = np.pad(codes, (0, pad))
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return bytes([len(s) % 4]) + packed.tobytes()

def unpack_signs(blob: bytes) -> np.ndarray:
    rem = blob[0]
    packed = np.frombuffer(blob[1:], dtype=np.uint8)
    codes = np.stack([(packed >> (2 * i)) & 3 for i in range(4)], axis=1).ravel()
    if rem:
        codes = codes[: len(codes) - (4 - rem)]
    return np.where(codes == 1, 1, np.where(codes == 2, -1, 0)).astype(np.int8)


def neuron_preact(u, neuron: int, mlp: MlpParams, enc: EncoderParams) -> float:
    """Pre-activation of the flat-indexed hidden neuron at a point."""
    _, pre = field_batch(np.asarray(u, dtype=float)[None], mlp, enc)
    return float(pre[0, neuron])


def _masked_backward(masks, mlp: MlpParams):
    """Per-layer reverse vectors with unit upstream; also returns df/dz.

    masks: list of (B, w_i) boolean arrays. Returns (gz (B,in), [rhat_i]).
    """
    r = np.broadcast_to(mlp.weights[-1], (masks[-1].shape[0] if masks else 1,
                                          mlp.weights[-1].shape[1])).copy() \
        if masks else None
    rhats = []
    if not masks:
        return None, rhats
    for i in range(len(masks) - 1, -1, -1):
        rhat = r * masks[i]
        rhats.append(rhat)
        r = rhat @ mlp.weights[i]
    rhats.reverse()
    return r, rhats


def grad_z_batch(u: np.ndarray, mlp: MlpParams, enc: EncoderParams) -> np.ndarray:
    """df/dz per point with the fixed activation pattern of each point."""
    z = encode(np.atleast_2d(u), enc)
    _, preacts = forward(z, mlp)
    masks = [p > 0 for p in preacts]
    if not masks:
        return np.broadcast_to(mlp.weights[-1][0], z.shape).copy()
    gz, _ = _masked_backward(masks, mlp)
    return gz


def grad_x_f(u: np.ndarray, mlp: MlpParams, enc: EncoderParams) -> np.ndarray:
    """Spatial gradient of the composed field, (B,3); piecewise constant."""
    u2 = np.atleast_2d(np.asarray(u, dtype=float))
    gz = grad_z_batch(u2, mlp, enc)
    grads = np.zeros((u2.shape[0], 3))
    data = interpolation_data(u2, enc)
    for level, (idx, _, t) in enumerate(data):
        g = enc.tables[level][idx]                     # (B,4,d)
        gdiff = g[:, 1:] - g[:, :1]                    # (B,3,d)
        cinv = C_UNIT_INV[t] * enc.resolutions[level]  # (B,3,3)
        gz_l = gz[:, level * enc.d:(level + 1) * enc.d]
        # A_l^T gz_l with A_l = gdiff^T @ cinv
        grads += np.einsum("bkj,bkd,bd->bj", cinv, gdiff, gz_l)
    return grads[0] if np.asarray(u).ndim == 1 else grads


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4096
    lr_mlp: float = 1e-3
    lr_features: float = 1e-2
    eikonal_weight: float = 5e-3
    eps_sign: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.eikonal_weight < 0:
            raise ValueError("eikonal weight must be nonnegative")


@dataclass
class TrainingSet:
    """Sample points already mapped into grid coordinates.

    input_chain is d(grid coords)/d(canonical scene coords); the eikonal
    norm is measured in scene units through this chain so targets and the
    unit-gradient property refer to the same metric.
    """

    points: np.ndarray
    targets: np.ndarray
    input_chain: np.ndarray = field(default_factory=lambda: np.eye(3))


class _Adam:
    def __init__(self, arrays: list[np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def loss_and_grads(points: np.ndarray, targets: np.ndarray, mlp: MlpParams,
                   enc: EncoderParams, eik_weight: float,
                   input_chain: np.ndarray):
    """Mean L1 + eikonal loss with analytic gradients for every parameter.

    Returns (l1, eik, grads_w, grads_b, grads_tables).
    """
    B = len(points)
    data = interpolation_data(points, enc)
    parts = [np.einsum("bi,bid->bd", w, enc.tables[lv][idx])
             for lv, (idx, w, _) in enumerate(data)]
    z = np.concatenate(parts, axis=1)

    hs = [z]
    preacts = []
    h = z
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        p = h @ w.T + b
        preacts.append(p)
        h = np.maximum(p, 0.0)
        hs.append(h)
    f = (h @ mlp.weights[-1].T + mlp.biases[-1])[:, 0]

    resid = f - targets
    l1 = float(np.mean(np.abs(resid)))

    # L1 backward
    delta = np.sign(resid)[:, None] / B
    gw = [np.zeros_like(w) for w in mlp.weights]
    gb = [np.zeros_like(b) for b in mlp.biases]
    gw[-1] += delta.T @ hs[-1]
    gb[-1] += delta.sum(axis=0)
    r = delta @ mlp.weights[-1]
    masks = [p > 0 for p in preacts]
    for i in range(len(masks) - 1, -1, -1):
        r = r * masks[i]
        gw[i] += r.T @ hs[i]
        gb[i] += r.sum(axis=0)
        r = r @ mlp.weights[i]
    gz_loss = r                                        # (B, D) from the L1 term

    gtab = [np.zeros_like(t) for t in enc.tables]
    accumulate_feature_grads(gtab, data, gz_loss, enc.d)

    eik = 0.0
    if eik_weight > 0.0:
        # per-sample df/dz with unit upstream, keeping the reverse vectors
        gz1, rhats = _masked_backward(masks, mlp)
        if gz1 is None:
            gz1 = np.broadcast_to(mlp.weights[-1], (B, mlp.weights[-1].shape[1])).copy()
        # spatial gradient in grid coords
        gy = np.zeros((B, 3))
        a_mats = []                                    # per level (B,d,3)
        for lv, (idx, _, t) in enumerate(data):
            g = enc.tables[lv][idx]
            gdiff = g[:, 1:] - g[:, :1]
            cinv = C_UNIT_INV[t] * enc.resolutions[lv]
            a_l = np.einsum("bkd,bkj->bdj", gdiff, cinv)
            a_mats.append(a_l)
            gy += np.einsum("bdj,bd->bj", a_l, gz1[:, lv * enc.d:(lv + 1) * enc.d])
        chain = np.asarray(input_chain, dtype=float)
        v = gy @ chain                                 # scene gradient (B,3)
        e = np.linalg.norm(v, axis=1)
        eik = float(np.mean((e - 1.0) ** 2))
        safe = np.maximum(e, 1e-12)
        u_scene = (2.0 * (e - 1.0) / safe)[:, None] * v
        u_y = (eik_weight / B) * (u_scene @ chain.T)   # d loss / d gy

        # feature side: d(gy . u_y)/d tables through the A_l blocks
        for lv, (idx, _, t) in enumerate(data):
            cinv = C_UNIT_INV[t] * enc.resolutions[lv]
            q = np.einsum("bkj,bj->bk", cinv, u_y)     # (B,3)
            gz1_l = gz1[:, lv * enc.d:(lv + 1) * enc.d]
            contrib = np.empty((B, 4, enc.d))
            contrib[:, 0] = -q.sum(axis=1)[:, None] * gz1_l
            contrib[:, 1:] = q[:, :, None] * gz1_l[:, None, :]
            np.add.at(gtab[lv], idx.reshape(-1), contrib.reshape(-1, enc.d))

        # MLP side: gradient of the JVP via a forward tangent pass
        c = np.zeros((B, z.shape[1]))
        for lv, a_l in enumerate(a_mats):
            c[:, lv * enc.d:(lv + 1) * enc.d] = np.einsum("bdj,bj->bd", a_l, u_y)
        for i, mask in enumerate(masks):
            gw[i] += rhats[i].T @ c
            c = (c @ mlp.weights[i].T) * mask
        gw[-1] += c.sum(axis=0)[None, :]

    return l1, eik, gw, gb, gtab


def train(data: TrainingSet, cfg: TrainConfig, enc: EncoderParams,
          grid: GridConfig, mlp: MlpParams | None = None,
          hidden=(12, 12, 12)):
    """Adam training of MLP and feature tables; deterministic given the seed.

    Returns (mlp, enc, history) where history holds per-epoch mean losses.
    """
    if len(data.points) == 0:
        raise TrainingError("empty training set")
    if mlp is None:
        mlp = init_mlp(enc.feature_dim, hidden=hidden, seed=cfg.seed)
    return train_params(data, cfg, mlp, enc, grid)


def train_params(data: TrainingSet, cfg: TrainConfig, mlp: MlpParams,
                 enc: EncoderParams, grid: GridConfig):
    mlp = mlp.copy()
    enc = enc.copy()
    rng = np.random.default_rng(cfg.seed)
    n = len(data.points)
    opt_mlp = _Adam(mlp.weights + mlp.biases, cfg.lr_mlp)
    opt_feat = _Adam(enc.tables, cfg.lr_features)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        l1_sum = eik_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            l1, eik, gw, gb, gtab = loss_and_grads(
                data.points[sel], data.targets[sel], mlp, enc,
                cfg.eikonal_weight, data.input_chain)
            total = l1 + cfg.eikonal_weight * eik
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {batches}: "
                    f"l1={l1} eik={eik}")
            opt_mlp.step(gw + gb)
            opt_feat.step(gtab)
            l1_sum += l1
            eik_sum += eik
            batches += 1
        history.append({
            "epoch": epoch,
            "l1": l1_sum / batches,
            "eikonal": eik_sum / batches,
            "total": l1_sum / batches + cfg.eikonal_weight * eik_sum / batches,
        })
    return mlp, enc, history
