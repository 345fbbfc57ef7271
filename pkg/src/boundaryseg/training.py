"""Adam training loop with polynomial learning-rate decay and bit-exact
checkpointing.

The learning rate follows alpha0 * (1 - e/N_e)^0.9 over epochs, where an
epoch is a fixed number of sampled crops (there is no dataset pass; crop
sampling is the data source). Checkpoints capture parameters, optimizer
moments, the step/epoch counters and the sampler RNG state, so resuming
reproduces the uninterrupted run bit for bit at equal step count.

Checkpoint container (little-endian): magic ``MCKP0001``, u32 entry
count, then per entry u16 name length, utf-8 name, u8 dtype code, u8
rank, rank x u32 dims, u64 payload bytes, raw buffer.
"""

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (CheckpointFormatError, ConfigHashMismatchError,
                     ContractViolation, GradientStateError, NonFiniteLossError)
from .losses import LossBreakdown, total_loss

CKPT_MAGIC = b"MCKP0001"
LOG_HEADER = ["step", "epoch", "lr"] + list(LossBreakdown.FIELDS)

_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.uint8, 3: np.int64}
_CODE_FOR = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class TrainConfig:
    alpha0: float = 2e-3
    total_epochs: int = 10
    steps_per_epoch: int = 50
    batch_size: int = 1
    seed: int = 0
    dice_eps: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        if self.alpha0 <= 0:
            raise ContractViolation(f"alpha0 must be > 0, got {self.alpha0}")
        if self.total_epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ContractViolation("epochs, steps_per_epoch and batch_size must be >= 1")

    @classmethod
    def desk_default(cls):
        return cls()

    @classmethod
    def paper_preset(cls):
        """Published schedule: alpha0 = 5e-5 over 300 epochs, batch 8."""
        return cls(alpha0=5e-5, total_epochs=300, steps_per_epoch=26, batch_size=8)

    def to_text(self):
        keys = ("alpha0", "total_epochs", "steps_per_epoch", "batch_size", "seed",
                "dice_eps", "adam_beta1", "adam_beta2", "adam_eps")
        return "".join(f"{k} = {getattr(self, k)!r}\n" for k in keys)

    @classmethod
    def from_dict(cls, values):
        base = cls()
        kwargs = {}
        for key, raw in values.items():
            if not hasattr(base, key):
                raise ContractViolation(f"train config: unknown key {key!r}")
            current = getattr(base, key)
            kwargs[key] = int(raw) if isinstance(current, int) else float(raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def lr_at(epoch, cfg):
    """alpha0 * (1 - e/N_e)^0.9, defined on 0 <= e <= N_e."""
    if epoch < 0 or epoch > cfg.total_epochs:
        raise ContractViolation(
            f"lr_at: epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.alpha0 * (1.0 - epoch / cfg.total_epochs) ** 0.9


def config_hash(net_config, train_config):
    """Stable digest of both configs; guards checkpoint compatibility."""
    text = net_config.to_text() + train_config.to_text()
    return hashlib.sha256(text.encode()).hexdigest()


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; parameter grads are cleared after."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("adam_step: params/grads/state lengths differ")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise GradientStateError(f"adam_step: parameter {i} has no gradient")
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.grad = None


@dataclass
class Checkpoint:
    """Everything needed for bit-exact training resumption."""

    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    step: int
    epoch: int
    rng_state: dict
    config_hash: str
    net_config_text: str


def _snapshot(net, state, step, epoch, rng, cfg_hash):
    names = [n for n, _ in net.named_parameters()]
    tensors = dict(net.named_parameters())
    return Checkpoint(
        params={n: tensors[n].data.copy() for n in names},
        adam_m={n: state.m[i].copy() for i, n in enumerate(names)},
        adam_v={n: state.v[i].copy() for i, n in enumerate(names)},
        adam_t=state.t,
        step=step,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
        config_hash=cfg_hash,
        net_config_text=net.config.to_text(),
    )


def restore_into(net, state, ckpt):
    """Load checkpoint buffers into an existing net + AdamState pair."""
    names = [n for n, _ in net.named_parameters()]
    if set(names) != set(ckpt.params):
        raise ConfigHashMismatchError("checkpoint parameter inventory does not match network")
    tensors = dict(net.named_parameters())
    for i, n in enumerate(names):
        if tensors[n].data.shape != ckpt.params[n].shape:
            raise ConfigHashMismatchError(
                f"checkpoint buffer {n} has shape {ckpt.params[n].shape}, "
                f"network expects {tensors[n].data.shape}")
        tensors[n].data[...] = ckpt.params[n]
        state.m[i][...] = ckpt.adam_m[n]
        state.v[i][...] = ckpt.adam_v[n]
    state.t = ckpt.adam_t


def _write_entry(fh, name, arr):
    arr = np.asarray(arr)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    code = _CODE_FOR.get(arr.dtype)
    if code is None:
        raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for buffer {name}")
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    payload = arr.tobytes()
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def save_checkpoint(path, ckpt):
    """Write the MCKP container; save -> load -> save is byte-identical."""
    entries = [
        ("meta/step", np.array(ckpt.step, dtype=np.int64)),
        ("meta/epoch", np.array(ckpt.epoch, dtype=np.int64)),
        ("meta/adam_t", np.array(ckpt.adam_t, dtype=np.int64)),
        ("meta/config_hash", np.frombuffer(ckpt.config_hash.encode(), dtype=np.uint8)),
        ("meta/net_config", np.frombuffer(ckpt.net_config_text.encode(), dtype=np.uint8)),
        ("meta/rng_state", np.frombuffer(json.dumps(ckpt.rng_state, sort_keys=True).encode(),
                                         dtype=np.uint8)),
    ]
    entries += [(f"param/{n}", a) for n, a in ckpt.params.items()]
    entries += [(f"adam_m/{n}", a) for n, a in ckpt.adam_m.items()]
    entries += [(f"adam_v/{n}", a) for n, a in ckpt.adam_v.items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path, expected_config_hash=None):
    """Parse an MCKP file; optionally verify the stored config hash."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad checkpoint magic")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        buffers = {}
        order = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/rank"))
            if code not in _DTYPE_CODES:
                raise CheckpointFormatError(f"{path}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, "payload size"))
            dtype = np.dtype(_DTYPE_CODES[code])
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
                raise CheckpointFormatError(
                    f"{path}: buffer {name} payload size disagrees with dims")
            arr = np.frombuffer(_read_exact(fh, nbytes, name), dtype=dtype).reshape(shape)
            buffers[name] = arr.copy()
            order.append(name)
        if fh.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after last entry")

    def _text(name):
        return buffers[name].tobytes().decode()

    try:
        ckpt = Checkpoint(
            params={n[len("param/"):]: buffers[n] for n in order if n.startswith("param/")},
            adam_m={n[len("adam_m/"):]: buffers[n] for n in order if n.startswith("adam_m/")},
            adam_v={n[len("adam_v/"):]: buffers[n] for n in order if n.startswith("adam_v/")},
            adam_t=int(buffers["meta/adam_t"]),
            step=int(buffers["meta/step"]),
            epoch=int(buffers["meta/epoch"]),
            rng_state=json.loads(_text("meta/rng_state")),
            config_hash=_text("meta/config_hash"),
            net_config_text=_text("meta/net_config"),
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing checkpoint entry {exc}") from exc
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash:
        raise ConfigHashMismatchError(
            f"{path}: checkpoint config hash {ckpt.config_hash[:12]}... does not match "
            f"expected {expected_config_hash[:12]}...")
    return ckpt


def _batch_tensor(arrays):
    return ad.Tensor(np.concatenate(arrays, axis=0))


def run_training(cfg, net, sampler, loss_fn=None, checkpoint_dir=None,
                 resume_from=None, log_path=None):
    """Train ``net`` on crops from ``sampler``.

    Per step: sample a batch -> forward -> loss -> backward -> Adam with
    lr_at(current epoch). Appends one CSV row per step and writes a
    checkpoint at the end of every epoch. ``resume_from`` restores a
    checkpoint and continues; given identical config/seed/thread count
    the continuation matches the uninterrupted run bitwise.

    Returns (final Checkpoint, csv log path).
    """
    cfg.validate()
    if loss_fn is None:
        loss_fn = lambda out, seg, edge: total_loss(out, seg, edge, eps=cfg.dice_eps)
    if checkpoint_dir is None:
        raise ContractViolation("run_training: checkpoint_dir is required")
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else (checkpoint_dir / "training_log.csv")

    params = net.parameters()
    state = AdamState(params)
    cfg_hash = config_hash(net.config, cfg)
    rng = np.random.default_rng(cfg.seed)
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_config_hash=cfg_hash)
        restore_into(net, state, ckpt)
        rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step

    total_steps = cfg.total_epochs * cfg.steps_per_epoch
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    final = None
    with open(log_path, mode, newline="") as log_fh:
        writer = csv.writer(log_fh)
        if mode == "w":
            writer.writerow(LOG_HEADER)
        for step in range(start_step, total_steps):
            epoch = step // cfg.steps_per_epoch
            crops = [sampler.sample(rng) for _ in range(cfg.batch_size)]
            if cfg.batch_size == 1:
                image, seg_t, edge_t = (crops[0].image, crops[0].seg_targets,
                                        crops[0].edge_targets)
            else:
                image = _batch_tensor([c.image.data for c in crops])
                seg_t = _batch_tensor([c.seg_targets.data for c in crops])
                edge_t = _batch_tensor([c.edge_targets.data for c in crops])

            outputs = net.forward(image)
            loss, breakdown = loss_fn(outputs, seg_t, edge_t)
            for name in LossBreakdown.FIELDS:
                if not np.isfinite(getattr(breakdown, name)):
                    raise NonFiniteLossError(
                        f"step {step}: loss term {name} is not finite")
            ad.backward(loss)
            lr = lr_at(epoch, cfg)
            adam_step(params, [p.grad for p in params], state, lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            writer.writerow([step, epoch, f"{lr:.10g}"]
                            + [f"{v:.8g}" for v in breakdown.as_row()])

            if (step + 1) % cfg.steps_per_epoch == 0:
                log_fh.flush()
                final = _snapshot(net, state, step + 1, epoch + 1, rng, cfg_hash)
                save_checkpoint(checkpoint_dir / f"ckpt_epoch_{epoch + 1:04d}.mckp", final)

    if final is None:  # resumed at the very end; re-snapshot for the caller
        final = _snapshot(net, state, total_steps, cfg.total_epochs, rng, cfg_hash)
    return final, log_path
