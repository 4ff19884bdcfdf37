"""Two-phase training: encoder-prior reconstruction, then flow matching with LE frozen.

Per-step randomness comes from counter-based substreams keyed by
``(seed, stream, step)``, so a run resumed from a checkpoint sees exactly the
batches, noise and flow times an uninterrupted run would.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ndtensor as nt
from . import sensing
from .flowmatch import SamplerConfig, integrate, l1_mean, make_path, mean_velocity_from_pred, regression_from_pred
from .metrics import psnr, ssim
from .ndtensor import ParamStore, Rng, Tensor
from .nnblocks import encode
from .synthdata import generate, make_split
from .unfolding import PRIOR_ENCODER, PRIOR_FLOW, PRIOR_NONE, FMUNetwork, ModelConfig, UnfoldingConfig, fmu_forward, reconstruct

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"training diverged at step {step}: non-finite {what}")
        self.step = step


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 20
    n_test: int = 5
    data_seed: int = 7
    rank: int = 3
    blobs: int = 4
    smoothness: float = 1.0
    augment: bool = True


@dataclass(frozen=True)
class SensingConfig:
    mode: str = sensing.FILTER
    shift: int = 2
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    phase: int = 1
    epochs: int = 50
    steps_per_epoch: int = 200
    batch_size: int = 4
    lr_start: float = 4e-4
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    lambda_mean: float = 5.0
    fm_weight: float = 1.0
    sample_weight: float = 1.0
    rec_weight: float = 1.0
    train_sampler_steps: int = 4
    eval_sampler_steps: int = 8
    finetune_unfolding: bool = True
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    unfolding: UnfoldingConfig = field(default_factory=UnfoldingConfig)

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        if self.lr_min > self.lr_start:
            raise ValueError("lr_min must not exceed lr_start")
        for name in ("lambda_mean", "fm_weight", "sample_weight", "rec_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["data"] = DataConfig(**d.get("data", {}))
        d["sensing"] = SensingConfig(**d.get("sensing", {}))
        model = dict(d.get("model", {}))
        d["model"] = ModelConfig(**model)
        d["unfolding"] = UnfoldingConfig(**d.get("unfolding", {}))
        return cls(**d)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# schedule and optimiser


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_min: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam on every trainable parameter, then zero all gradients."""
    for p in params.entries():
        if p.trainable and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p in params.entries():
        if not p.trainable:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(g)
            state.v[p.name] = np.zeros_like(g)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = Tensor(p.value.data - update.astype(p.value.dtype), requires_grad=True)
    params.zero_grad()


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    sys: sensing.SensingSystem
    train: np.ndarray  # [N, W, H, L]
    test: np.ndarray


def make_mask(cfg: TrainConfig, seed: int) -> np.ndarray:
    m = cfg.model
    rng = Rng(seed, ("mask",))
    if cfg.sensing.mode == sensing.CASSI:
        return (rng.uniform((m.width, m.height)) < 0.5).astype(np.float64)
    # rounded through float32 so the mask survives a 32-bit checkpoint unchanged
    return rng.uniform((m.width, m.height, m.bands)).astype(np.float32).astype(np.float64)


def make_system(cfg: TrainConfig, mask: np.ndarray) -> sensing.SensingSystem:
    s = cfg.sensing
    if s.mode == sensing.CASSI:
        return sensing.SensingSystem.cassi(mask, cfg.model.bands, s.shift, s.noise_sigma)
    return sensing.SensingSystem.filter(mask, s.noise_sigma)


def build_dataset(cfg: TrainConfig) -> Dataset:
    d, m = cfg.data, cfg.model
    train_specs, test_specs = make_split(
        d.n_train, d.n_test, d.data_seed, width=m.width, height=m.height, bands=m.bands, rank=d.rank, blobs=d.blobs, smoothness=d.smoothness
    )
    train = np.stack([generate(s) for s in train_specs])
    test = np.stack([generate(s) for s in test_specs])
    return Dataset(make_system(cfg, make_mask(cfg, cfg.seed)), train, test)


def draw_batch(ds: Dataset, cfg: TrainConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Training cubes and their simulated measurements for one step."""
    idx = rng.integers(len(ds.train), cfg.batch_size)
    x = ds.train[idx]
    if cfg.data.augment:
        flips = rng.integers(4, cfg.batch_size)
        x = np.stack([np.flip(c, axis=tuple(ax for ax, bit in ((0, 1), (1, 2)) if f & bit)) if f else c for c, f in zip(x, flips)])
    y = sensing.forward(ds.sys, x, rng.split("noise"))
    return x.astype(nt.default_dtype()), y.astype(nt.default_dtype())


# ---------------------------------------------------------------------------
# checkpoints and loops


@dataclass
class Checkpoint:
    params: ParamStore
    adam: AdamState
    phase: int
    step: int
    config: dict
    config_hash: str
    rng_state: dict
    losses: list[float] = field(default_factory=list)
    mask: np.ndarray | None = None

    @property
    def epoch(self) -> int:
        return self.step // max(1, self.config.get("steps_per_epoch", 1))


def phase1_loss(net: FMUNetwork, params: ParamStore, ds: Dataset, cfg: TrainConfig, rng: Rng) -> Tensor:
    x, y = draw_batch(ds, cfg, rng)
    prior = None
    if net.unfolding.prior != PRIOR_NONE:
        prior = encode(net.encoder, params, sensing.pinv_apply(ds.sys, y), x)
    xhat = fmu_forward(net, params, ds.sys, y, prior)
    return cfg.rec_weight * l1_mean(xhat, x)


def phase2_loss(net: FMUNetwork, params: ParamStore, ds: Dataset, cfg: TrainConfig, rng: Rng, parts: dict | None = None) -> Tensor:
    x, y = draw_batch(ds, cfg, rng)
    y_norm = sensing.pinv_apply(ds.sys, y)
    with nt.no_grad():
        z_le = encode(net.encoder, params, y_norm, x)
    cond = net.condition(params, y_norm)
    vn = net.velocity_fn(params)

    z1 = nt.rand_normal(rng.split("z1"), z_le.shape)
    t = rng.split("t").uniform(cfg.batch_size)
    path = make_path(z_le, z1, t)
    pred = vn(path.zt, path.t, cond)
    l_point = regression_from_pred(pred, path.target)
    l_mean = mean_velocity_from_pred(pred, path.target)

    z0_hat = integrate(vn, nt.rand_normal(rng.split("sample"), z_le.shape), cond, cfg.train_sampler_steps)
    l_fm = l1_mean(z0_hat, z_le) + cfg.lambda_mean * l_mean
    l_rec = l1_mean(fmu_forward(net, params, ds.sys, y, z0_hat), x)

    if parts is not None:
        parts.update(point=l_point.item(), mean=l_mean.item(), fm=l_fm.item(), rec=l_rec.item())
    return cfg.fm_weight * l_point + cfg.sample_weight * l_fm + cfg.rec_weight * l_rec


def _loop(cfg, net, params, ds, ckpt: Checkpoint, loss_fn, stream: str, max_steps: int | None) -> Checkpoint:
    total = cfg.total_steps
    stop = total if max_steps is None else min(total, ckpt.step + max_steps)
    root = Rng(cfg.seed, (stream,))
    for step in range(ckpt.step, stop):
        loss = loss_fn(net, params, ds, cfg, root.split(step))
        value = loss.item()
        if not math.isfinite(value):
            nt.get_tape().clear()
            raise TrainingDiverged(step)
        nt.backward(loss, params)
        try:
            adam_step(params, ckpt.adam, cosine_lr(step, total, cfg.lr_start, cfg.lr_min), cfg.beta1, cfg.beta2, cfg.eps_adam)
        except FloatingPointError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        ckpt.losses.append(value)
        ckpt.step = step + 1
        if (step + 1) % cfg.steps_per_epoch == 0:
            log.info("%s epoch %d  loss %.5f", stream, (step + 1) // cfg.steps_per_epoch, np.mean(ckpt.losses[-cfg.steps_per_epoch :]))
    ckpt.rng_state = {"seed": cfg.seed, "stream": stream, "step": ckpt.step}
    return ckpt


def _fresh_checkpoint(cfg: TrainConfig, params: ParamStore, phase: int, stream: str, mask) -> Checkpoint:
    return Checkpoint(params, AdamState(), phase, 0, cfg.to_dict(), config_hash(cfg), {"seed": cfg.seed, "stream": stream, "step": 0}, [], mask)


def build_network(cfg: TrainConfig) -> FMUNetwork:
    return FMUNetwork(cfg.model, cfg.unfolding)


def train_phase1(cfg: TrainConfig, resume: Checkpoint | None = None, max_steps: int | None = None, dataset: Dataset | None = None) -> Checkpoint:
    """Train LE, denoisers and step sizes on the reconstruction loss with the encoder prior.

    With ``unfolding.prior == "none"`` this is the prior-free baseline.
    """
    if cfg.phase != 1:
        raise ValueError("train_phase1 needs a phase-1 config")
    cfg = replace(cfg, unfolding=replace(cfg.unfolding, prior=PRIOR_NONE if cfg.unfolding.prior == PRIOR_NONE else PRIOR_ENCODER))
    ds = dataset or build_dataset(cfg)
    net = build_network(cfg)
    if resume is None:
        params = net.init(ParamStore(cfg.seed))
        ckpt = _fresh_checkpoint(cfg, params, 1, "phase1", ds.sys.mask)
    else:
        _check_resume(resume, cfg, 1)
        ckpt = resume
    return _loop(cfg, net, ckpt.params, ds, ckpt, phase1_loss, "phase1", max_steps)


def train_phase2(
    cfg: TrainConfig, phase1: Checkpoint, resume: Checkpoint | None = None, max_steps: int | None = None, dataset: Dataset | None = None
) -> Checkpoint:
    """Freeze LE and train the condition encoder, velocity net (and, by default, the unfolding)."""
    if cfg.phase != 2:
        raise ValueError("train_phase2 needs a phase-2 config")
    if phase1.phase != 1 or "le.stem.w" not in phase1.params:
        raise ValueError("train_phase2 needs a phase-1 checkpoint trained with the encoder prior")
    cfg = replace(cfg, unfolding=replace(cfg.unfolding, prior=PRIOR_FLOW))
    ds = dataset or build_dataset(cfg)
    net = build_network(cfg)
    if resume is None:
        params = ParamStore(cfg.seed)
        fresh = net.init(ParamStore(cfg.seed))
        for name in fresh:
            src = phase1.params if name in phase1.params else fresh
            params.add(name, src[name].data, trainable=src.entry(name).trainable)
        params.set_trainable("le.", False)
        if not cfg.finetune_unfolding:
            params.set_trainable("den.", False)
            params.set_trainable("unf.", False)
        ckpt = _fresh_checkpoint(cfg, params, 2, "phase2", ds.sys.mask)
    else:
        _check_resume(resume, cfg, 2)
        ckpt = resume
    return _loop(cfg, net, ckpt.params, ds, ckpt, phase2_loss, "phase2", max_steps)


def train_baseline(cfg: TrainConfig, dataset: Dataset | None = None) -> Checkpoint:
    """Prior-free model with the same config as phase 1, ``prior`` aside.

    Pass ``epochs=2 * cfg.epochs`` to match the step count of both phases combined.
    """
    base = replace(cfg, phase=1, unfolding=replace(cfg.unfolding, prior=PRIOR_NONE))
    return train_phase1(base, dataset=dataset)


def _check_resume(ckpt: Checkpoint, cfg: TrainConfig, phase: int) -> None:
    if ckpt.phase != phase:
        raise ValueError(f"cannot resume phase {phase} from a phase-{ckpt.phase} checkpoint")
    if ckpt.config_hash != config_hash(cfg):
        raise ValueError("checkpoint was written with a different configuration")


# ---------------------------------------------------------------------------
# evaluation


def evaluate(cfg: TrainConfig, ckpt: Checkpoint, cubes: np.ndarray, sys: sensing.SensingSystem, seed: int | None = None) -> tuple[list[float], list[float]]:
    """PSNR/SSIM of reconstructions of ``cubes``; flow-prior models sample with ``eval_sampler_steps``."""
    ucfg = TrainConfig.from_dict(ckpt.config).unfolding
    prior = PRIOR_NONE if ucfg.prior == PRIOR_NONE else PRIOR_FLOW
    net = FMUNetwork(cfg.model, replace(ucfg, prior=prior))
    root = Rng(cfg.seed if seed is None else seed, ("eval",))
    out_psnr, out_ssim = [], []
    for i, cube in enumerate(cubes):
        rng = root.split(i)
        y = sensing.forward(sys, cube, rng.split("noise")).astype(nt.default_dtype())
        xhat = reconstruct(net, ckpt.params, sys, y, SamplerConfig(cfg.eval_sampler_steps), rng.split("prior"))[0]
        out_psnr.append(psnr(xhat, cube))
        out_ssim.append(ssim(xhat, cube))
    return out_psnr, out_ssim


@dataclass
class AblationResult:
    seed: int
    flow_psnr: list[float]
    flow_ssim: list[float]
    base_psnr: list[float]
    base_ssim: list[float]

    @property
    def gain_db(self) -> float:
        """Median test PSNR of the flow-prior model minus that of the prior-free baseline."""
        return float(np.median(self.flow_psnr) - np.median(self.base_psnr))


def ablation(cfg: TrainConfig, dataset: Dataset | None = None) -> AblationResult:
    """Phase 1 then phase 2 against a prior-free baseline trained under the same config."""
    cfg = replace(cfg, phase=1)
    ds = dataset or build_dataset(cfg)
    p1 = train_phase1(cfg, dataset=ds)
    p2 = train_phase2(replace(cfg, phase=2), p1, dataset=ds)
    base = train_baseline(cfg, dataset=ds)
    fp, fs = evaluate(cfg, p2, ds.test, ds.sys)
    bp, bs = evaluate(cfg, base, ds.test, ds.sys)
    return AblationResult(cfg.seed, fp, fs, bp, bs)
