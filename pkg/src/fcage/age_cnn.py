"""3D residual CNN age regressor, trained from scratch with momentum SGD.

Architecture: Conv(3x3x3) + BN + ReLU, three residual blocks, then
FC1 + ReLU + dropout and a single-output FC2.  Max pooling (2, stride 2)
follows the first conv and each residual block; the pool count is
configurable so small grids stay legal.  Each residual block is
[Conv-BN-ReLU-Conv-BN] + shortcut, then ReLU; the shortcut is a 1x1x1
conv + BN when the channel count changes, identity otherwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as ops
from . import volume_io


@dataclass
class NetworkConfig:
    in_channels: int
    input_grid: tuple[int, int, int]
    conv1_filters: int = 64
    resblock_filters: tuple[int, int, int] = (64, 128, 128)
    fc1_units: int = 256
    dropout_p: float = 0.5
    n_pool_stages: int = 4

    def validate(self) -> None:
        if self.in_channels < 1 or self.conv1_filters < 1 or self.fc1_units < 1:
            raise ValueError("channel and unit counts must be positive")
        if any(f < 1 for f in self.resblock_filters):
            raise ValueError("resblock filter counts must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 0 <= self.n_pool_stages <= 4:
            raise ValueError("n_pool_stages must be in 0..4")
        need = 2**self.n_pool_stages
        if any(g < need for g in self.input_grid):
            raise ValueError(
                f"grid {self.input_grid} too small for {self.n_pool_stages} "
                f"pooling stages (each extent must be >= {need} after padding)"
            )


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    momentum: float = 0.9
    lr_drop_factor: float = 0.1
    lr_step: int = 10000
    max_iters: int = 30000
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if min(self.base_lr, self.lr_step, self.max_iters, self.batch_size) <= 0:
            raise ValueError("training scalars must be positive")
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ValueError("lr_drop_factor must be in (0, 1]")
        if self.momentum < 0:
            raise ValueError("momentum must be non-negative")


def _pooled_extent(e: int, times: int) -> int:
    for _ in range(times):
        e = (e + 1) // 2
    return e


class AgeCNN:
    """Parameter container plus hand-written forward/backward passes."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self.bn_stats: dict[str, dict] = {}
        self.trained_on: frozenset[str] = frozenset()
        rng = np.random.default_rng(seed)

        def conv_init(name, f, c, k):
            fan_in = c * k**3
            self.params[f"{name}.w"] = (
                rng.standard_normal((f, c, k, k, k)) * np.sqrt(2.0 / fan_in)
            ).astype(dtype)
            self.params[f"{name}.b"] = np.zeros(f, dtype=dtype)

        def bn_init(name, c):
            self.params[f"{name}.gamma"] = np.ones(c, dtype=dtype)
            self.params[f"{name}.beta"] = np.zeros(c, dtype=dtype)
            self.bn_stats[name] = {"mean": None, "var": None}

        def fc_init(name, n_in, n_out):
            self.params[f"{name}.w"] = (
                rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
            ).astype(dtype)
            self.params[f"{name}.b"] = np.zeros(n_out, dtype=dtype)

        conv_init("conv1", cfg.conv1_filters, cfg.in_channels, 3)
        bn_init("bn1", cfg.conv1_filters)
        prev = cfg.conv1_filters
        self.block_channels = []
        for i, f in enumerate(cfg.resblock_filters):
            conv_init(f"rb{i}.conv1", f, prev, 3)
            bn_init(f"rb{i}.bn1", f)
            conv_init(f"rb{i}.conv2", f, f, 3)
            bn_init(f"rb{i}.bn2", f)
            if prev != f:
                conv_init(f"rb{i}.short", f, prev, 1)
                bn_init(f"rb{i}.shortbn", f)
            self.block_channels.append((prev, f))
            prev = f

        self.pool_at = [s < cfg.n_pool_stages for s in range(4)]
        gz, gy, gx = cfg.input_grid
        n_pools = cfg.n_pool_stages
        self.flat_dim = prev * (
            _pooled_extent(gz, n_pools)
            * _pooled_extent(gy, n_pools)
            * _pooled_extent(gx, n_pools)
        )
        fc_init("fc1", self.flat_dim, cfg.fc1_units)
        fc_init("fc2", cfg.fc1_units, 1)

    # ---- forward / backward -------------------------------------------

    def _bn(self, name, x, mode, caches):
        st = self.bn_stats[name]
        gamma = self.params[f"{name}.gamma"]
        beta = self.params[f"{name}.beta"]
        out, cache, mean, var = ops.batchnorm_forward(
            x, gamma, beta, mode, running_mean=st["mean"], running_var=st["var"]
        )
        if mode == "train":
            st["mean"], st["var"] = mean, var
            caches[name] = cache
        return out

    def _resblock_forward(self, i, x, mode, caches):
        p = self.params
        caches[f"rb{i}.x"] = x
        h = ops.conv3d_forward(x, p[f"rb{i}.conv1.w"], p[f"rb{i}.conv1.b"], pad=1)
        h = self._bn(f"rb{i}.bn1", h, mode, caches)
        caches[f"rb{i}.bn1.out"] = h
        r1 = ops.relu(h)
        caches[f"rb{i}.r1"] = r1
        h = ops.conv3d_forward(r1, p[f"rb{i}.conv2.w"], p[f"rb{i}.conv2.b"], pad=1)
        h = self._bn(f"rb{i}.bn2", h, mode, caches)
        if f"rb{i}.short.w" in p:
            s = ops.conv3d_forward(x, p[f"rb{i}.short.w"], p[f"rb{i}.short.b"], pad=0)
            s = self._bn(f"rb{i}.shortbn", s, mode, caches)
        else:
            s = x
        pre = h + s
        caches[f"rb{i}.pre"] = pre
        return ops.relu(pre)

    def forward(self, x, mode, dropout_rng=None):
        """Returns (predictions (N,), features (N, fc1_units), caches)."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.ndim != 5:
            raise ValueError("expected (N, C, Z, Y, X) input")
        if x.shape[1] != self.cfg.in_channels or x.shape[2:] != tuple(self.cfg.input_grid):
            raise ValueError(
                f"input shape {x.shape[1:]} does not match configured "
                f"({self.cfg.in_channels}, {self.cfg.input_grid})"
            )
        caches: dict = {}
        p = self.params
        h = ops.conv3d_forward(x, p["conv1.w"], p["conv1.b"], pad=1)
        caches["conv1.x"] = x
        h = self._bn("bn1", h, mode, caches)
        caches["bn1.out"] = h
        h = ops.relu(h)
        if self.pool_at[0]:
            caches["pool0.shape"] = h.shape
            h, am = ops.maxpool3d_forward(h)
            caches["pool0.argmax"] = am
        for i in range(len(self.cfg.resblock_filters)):
            h = self._resblock_forward(i, h, mode, caches)
            if self.pool_at[i + 1]:
                caches[f"pool{i + 1}.shape"] = h.shape
                h, am = ops.maxpool3d_forward(h)
                caches[f"pool{i + 1}.argmax"] = am
        caches["flatten.shape"] = h.shape
        flat = h.reshape(h.shape[0], -1)
        caches["fc1.x"] = flat
        h = ops.fully_connected(flat, p["fc1.w"], p["fc1.b"])
        caches["fc1.pre"] = h
        feats = ops.relu(h)
        h, mask = ops.dropout_forward(
            feats, self.cfg.dropout_p, rng=dropout_rng, train=(mode == "train")
        )
        caches["drop.mask"] = mask
        caches["fc2.x"] = h
        out = ops.fully_connected(h, p["fc2.w"], p["fc2.b"])
        return out[:, 0], feats, caches

    def _resblock_backward(self, i, g, caches, grads):
        p = self.params
        g = ops.relu_backward(g, caches[f"rb{i}.pre"])
        # main path
        gm, grads[f"rb{i}.bn2.gamma"], grads[f"rb{i}.bn2.beta"] = ops.batchnorm_backward(
            g, caches[f"rb{i}.bn2"]
        )
        gm, grads[f"rb{i}.conv2.w"], grads[f"rb{i}.conv2.b"] = ops.conv3d_backward(
            caches[f"rb{i}.r1"], p[f"rb{i}.conv2.w"], gm, pad=1
        )
        gm = ops.relu_backward(gm, caches[f"rb{i}.bn1.out"])
        gm, grads[f"rb{i}.bn1.gamma"], grads[f"rb{i}.bn1.beta"] = ops.batchnorm_backward(
            gm, caches[f"rb{i}.bn1"]
        )
        gm, grads[f"rb{i}.conv1.w"], grads[f"rb{i}.conv1.b"] = ops.conv3d_backward(
            caches[f"rb{i}.x"], p[f"rb{i}.conv1.w"], gm, pad=1
        )
        # shortcut path
        if f"rb{i}.short.w" in p:
            gs, grads[f"rb{i}.shortbn.gamma"], grads[f"rb{i}.shortbn.beta"] = (
                ops.batchnorm_backward(g, caches[f"rb{i}.shortbn"])
            )
            gs, grads[f"rb{i}.short.w"], grads[f"rb{i}.short.b"] = ops.conv3d_backward(
                caches[f"rb{i}.x"], p[f"rb{i}.short.w"], gs, pad=0
            )
        else:
            gs = g
        return gm + gs

    def backward(self, caches, grad_pred):
        """Gradients of the loss w.r.t. every parameter, given dL/dpred."""
        p = self.params
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_pred, dtype=self.dtype)[:, None]
        g, grads["fc2.w"], grads["fc2.b"] = ops.fully_connected_backward(
            caches["fc2.x"], p["fc2.w"], g
        )
        g = ops.dropout_backward(g, caches["drop.mask"])
        g = ops.relu_backward(g, caches["fc1.pre"])
        g, grads["fc1.w"], grads["fc1.b"] = ops.fully_connected_backward(
            caches["fc1.x"], p["fc1.w"], g
        )
        g = g.reshape(caches["flatten.shape"])
        for i in reversed(range(len(self.cfg.resblock_filters))):
            if self.pool_at[i + 1]:
                g = ops.maxpool3d_backward(
                    g, caches[f"pool{i + 1}.argmax"], caches[f"pool{i + 1}.shape"]
                )
            g = self._resblock_backward(i, g, caches, grads)
        if self.pool_at[0]:
            g = ops.maxpool3d_backward(g, caches["pool0.argmax"], caches["pool0.shape"])
        g = ops.relu_backward(g, caches["bn1.out"])
        g, grads["bn1.gamma"], grads["bn1.beta"] = ops.batchnorm_backward(
            g, caches["bn1"]
        )
        _, grads["conv1.w"], grads["conv1.b"] = ops.conv3d_backward(
            caches["conv1.x"], p["conv1.w"], g, pad=1
        )
        return grads

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> AgeCNN:
    return AgeCNN(cfg, seed=seed, dtype=dtype)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Stepwise schedule: base_lr * factor^floor(iter / step)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * cfg.lr_drop_factor ** (iteration // cfg.lr_step)


def sgd_step(params, grads, velocity, lr: float, momentum: float) -> None:
    """Classic momentum: v <- momentum*v - lr*g; w <- w + v.  In place."""
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        v = velocity[name]
        v *= momentum
        v -= lr * g.astype(p.dtype, copy=False)
        p += v


@dataclass
class TrainResult:
    model: AgeCNN
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (iter, lr, loss)


def train(
    model: AgeCNN,
    dataset: list[tuple[np.ndarray, float]],
    cfg: TrainConfig,
    subject_ids: list[str] | None = None,
) -> TrainResult:
    """Minibatch SGD on (fc_image_data, age) pairs.

    Batches come from a seeded shuffle, reshuffled each epoch.  Aborts
    with a diagnostic if the loss goes non-finite.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("empty dataset")
    n = len(dataset)
    images = [np.ascontiguousarray(d, dtype=model.dtype) for d, _ in dataset]
    ages = np.array([a for _, a in dataset], dtype=model.dtype)
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace: list[tuple[int, float, float]] = []
    order: list[int] = []
    pos = 0
    for it in range(cfg.max_iters):
        if pos + cfg.batch_size > len(order):
            order = list(shuffle_rng.permutation(n))
            pos = 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        x = np.stack([images[i] for i in idx])
        y = ages[idx]
        pred, _, caches = model.forward(x, "train", dropout_rng=dropout_rng)
        loss, dpred = ops.euclidean_loss(pred.astype(np.float64), y.astype(np.float64))
        if not np.isfinite(loss):
            batch = [subject_ids[i] if subject_ids else str(i) for i in idx]
            raise RuntimeError(
                f"non-finite loss {loss} at iteration {it}, batch {batch}"
            )
        lr = lr_at(it, cfg)
        grads = model.backward(caches, dpred)
        sgd_step(model.params, grads, velocity, lr, cfg.momentum)
        trace.append((it, lr, loss))
    if subject_ids is not None:
        model.trained_on = frozenset(subject_ids)
    return TrainResult(model=model, trace=trace)


def predict(model: AgeCNN, fc_data: np.ndarray) -> float:
    """Eval-mode predicted age for one (K, Z, Y, X) FC image."""
    pred, _, _ = model.forward(fc_data[None], "eval")
    return float(pred[0])


def predict_batch(model: AgeCNN, fc_stack: np.ndarray) -> np.ndarray:
    pred, _, _ = model.forward(fc_stack, "eval")
    return pred.astype(np.float64)


def features(model: AgeCNN, fc_data: np.ndarray) -> np.ndarray:
    """Post-ReLU FC1 activations (pre-dropout) for one FC image."""
    _, feats, _ = model.forward(fc_data[None], "eval")
    return feats[0].astype(np.float64)


# ---- checkpoints -------------------------------------------------------


def save_checkpoint(dirpath, model: AgeCNN) -> None:
    os.makedirs(dirpath, exist_ok=True)
    index = {
        "config": {
            "in_channels": model.cfg.in_channels,
            "input_grid": list(model.cfg.input_grid),
            "conv1_filters": model.cfg.conv1_filters,
            "resblock_filters": list(model.cfg.resblock_filters),
            "fc1_units": model.cfg.fc1_units,
            "dropout_p": model.cfg.dropout_p,
            "n_pool_stages": model.cfg.n_pool_stages,
        },
        "params": {},
        "bn": {},
        "trained_on": sorted(model.trained_on),
    }
    for name, arr in model.params.items():
        fname = name.replace(".", "_") + ".bvol"
        volume_io.write_bvol(os.path.join(dirpath, fname), arr.astype(np.float32))
        index["params"][name] = {"file": fname, "shape": list(arr.shape)}
    for name, st in model.bn_stats.items():
        if st["mean"] is None:
            index["bn"][name] = None
            continue
        mfile = name.replace(".", "_") + "_mean.bvol"
        vfile = name.replace(".", "_") + "_var.bvol"
        volume_io.write_bvol(os.path.join(dirpath, mfile), st["mean"].astype(np.float32))
        volume_io.write_bvol(os.path.join(dirpath, vfile), st["var"].astype(np.float32))
        index["bn"][name] = {"mean": mfile, "var": vfile}
    with open(os.path.join(dirpath, "index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(dirpath) -> AgeCNN:
    with open(os.path.join(dirpath, "index.json"), "r", encoding="utf-8") as fh:
        index = json.load(fh)
    c = index["config"]
    cfg = NetworkConfig(
        in_channels=c["in_channels"],
        input_grid=tuple(c["input_grid"]),
        conv1_filters=c["conv1_filters"],
        resblock_filters=tuple(c["resblock_filters"]),
        fc1_units=c["fc1_units"],
        dropout_p=c["dropout_p"],
        n_pool_stages=c["n_pool_stages"],
    )
    model = AgeCNN(cfg, seed=0)
    for name, entry in index["params"].items():
        arr = volume_io.read_bvol(os.path.join(dirpath, entry["file"]))
        model.params[name] = arr.reshape(entry["shape"]).astype(model.dtype)
    for name, entry in index["bn"].items():
        if entry is None:
            model.bn_stats[name] = {"mean": None, "var": None}
        else:
            model.bn_stats[name] = {
                "mean": volume_io.read_bvol(os.path.join(dirpath, entry["mean"])).astype(np.float64),
                "var": volume_io.read_bvol(os.path.join(dirpath, entry["var"])).astype(np.float64),
            }
    model.trained_on = frozenset(index.get("trained_on", []))
    return model
