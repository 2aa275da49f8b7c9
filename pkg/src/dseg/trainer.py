"""Training loop: batch composition, alternating critic/generator updates,
validation-based model selection, and the three non-disentangling baselines.

Checkpoints are keyed flat maps of parameter arrays (see
:mod:`dseg.preprocess`) whose keys follow the module attribute namespaces
``encoder.*``, ``seg_dec.*``, ``img_dec.*``, ``critic.*``, plus a ``meta.json``
entry holding the build configuration.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .critic import Critic, CriticConfig, critic_loss, pseudo_healthy_loss
from .decoders import ImageDecoder, SegDecoder, SegDecoderConfig, SpadeDecoderConfig
from .encoder import Encoder, EncoderConfig, init_params
from .errors import (
    ConfigurationError,
    LoadError,
    NumericError,
    SchedulingError,
    ValidationError,
)
from .losses import LossReport, LossWeights, cross_entropy_loss, dice_loss, recon_loss
from .phantom import CaseRecord
from .preprocess import read_named_arrays, write_named_arrays

METHODS = ("disentangler", "seg_only", "seg_recon", "seg_recon_healthy")

BEST_CKPT = "best.ckpt"
LAST_CKPT = "last.ckpt"
LOSS_LOG = "loss_log.tsv"
CONFIG_SNAPSHOT = "config.json"
RUN_META = "run.json"
DIAGNOSTICS = "diagnostics.json"


@dataclass(frozen=True)
class TrainConfig:
    method: str = "disentangler"
    epochs: int = 60
    lr: float = 1e-3
    critic_lr: float | None = None
    n_critic: int = 1
    seed: int = 0
    healthy_per_batch: int = 2
    disease_per_batch: int = 2
    mask_gradient: bool = True
    skip_drop_count: int = 3
    spade_hidden_channels: int = 16
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    critic: CriticConfig = field(default_factory=CriticConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0 or (self.critic_lr is not None and self.critic_lr <= 0):
            raise ConfigurationError("learning rates must be positive")
        if self.n_critic < 1:
            raise ConfigurationError("n_critic must be >= 1")
        if self.healthy_per_batch < 1 or self.disease_per_batch < 1:
            raise ConfigurationError("per-batch label counts must be >= 1")
        self.encoder.validate()
        self.weights.validate()
        self.critic.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig(**d["encoder"])
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "critic" in d and isinstance(d["critic"], dict):
            crit = dict(d["critic"])
            if "hidden" in crit and crit["hidden"] is not None:
                crit["hidden"] = tuple(crit["hidden"])
            d["critic"] = CriticConfig(**crit)
        return cls(**d)


@dataclass(frozen=True)
class CheckpointMeta:
    epoch: int
    val_combo: float
    path: Path


class DisentangleModel(nn.Module):
    """Composite model; baseline methods construct only the parts they train."""

    def __init__(self, cfg: TrainConfig, grid_size: int):
        super().__init__()
        cfg.validate()
        if grid_size % (2**cfg.encoder.n_levels) != 0:
            raise ConfigurationError(
                f"grid size {grid_size} not divisible by 2^{cfg.encoder.n_levels}"
            )
        self.train_cfg = cfg
        self.grid_size = grid_size
        self.encoder = Encoder(cfg.encoder)
        self.seg_dec = SegDecoder(SegDecoderConfig.from_encoder(cfg.encoder))
        if cfg.method != "seg_only":
            self.img_dec = ImageDecoder(
                SpadeDecoderConfig.from_encoder(
                    cfg.encoder,
                    skip_drop_count=cfg.skip_drop_count,
                    spade_hidden_channels=cfg.spade_hidden_channels,
                    use_spade=cfg.method == "disentangler",
                )
            )
        else:
            self.img_dec = None
        if cfg.method == "disentangler":
            latent_side = grid_size // (2**cfg.encoder.n_levels)
            in_features = cfg.encoder.resolved_latent_channels() * latent_side**3
            self.critic = Critic(dataclasses.replace(cfg.critic, in_features=in_features))
        else:
            self.critic = None

    def generator_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.encoder, self.seg_dec]
        if self.img_dec is not None:
            mods.append(self.img_dec)
        return mods

    def generator_parameters(self):
        for m in self.generator_modules():
            yield from m.parameters()

    @torch.no_grad()
    def predict(self, x: Tensor) -> dict[str, Tensor]:
        """Inference outputs for a batch: mask probabilities and, when the
        image decoder exists, the re-entangled and pseudo-healthy images."""
        was_training = self.training
        self.eval()
        try:
            z_h, z_d, skips = self.encoder(x)
            m = self.seg_dec(z_d, skips)
            out = {"mask_prob": m}
            if self.img_dec is not None:
                out["recon"] = self.img_dec(z_h, skips, m)
                out["pseudo_healthy"] = self.img_dec(z_h, skips, torch.zeros_like(m))
        finally:
            self.train(was_training)
        return out


def build_model(cfg: TrainConfig, grid_size: int) -> DisentangleModel:
    """Construct and deterministically initialize the model for a config."""
    model = DisentangleModel(cfg, grid_size)
    init_params(model, cfg.seed)
    return model


@dataclass
class TrainState:
    model: DisentangleModel
    cfg: TrainConfig
    gen_opt: torch.optim.Optimizer
    critic_opt: torch.optim.Optimizer | None
    alpha_gen: torch.Generator
    step: int = 0


def make_state(cfg: TrainConfig, grid_size: int) -> TrainState:
    model = build_model(cfg, grid_size)
    gen_opt = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr)
    critic_opt = None
    if model.critic is not None:
        critic_opt = torch.optim.Adam(
            model.critic.parameters(), lr=cfg.critic_lr if cfg.critic_lr else cfg.lr
        )
    alpha_gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(model, cfg, gen_opt, critic_opt, alpha_gen)


def _assert_composition(healthy: Tensor, cfg: TrainConfig) -> None:
    n_h = int(healthy.sum())
    n_d = int((~healthy).sum())
    if n_h != cfg.healthy_per_batch or n_d != cfg.disease_per_batch:
        raise SchedulingError(
            f"batch composition {n_h} healthy + {n_d} disease, expected "
            f"{cfg.healthy_per_batch} + {cfg.disease_per_batch}"
        )


def train_step_disentangler(
    state: TrainState, x: Tensor, gt: Tensor, healthy: Tensor
) -> LossReport:
    """One alternating update: n_critic critic steps on detached latents,
    then one generator step on the full objective."""
    cfg = state.cfg
    model = state.model
    _assert_composition(healthy, cfg)
    model.train()

    z_h, z_d, skips = model.encoder(x)
    z_neg = z_h[healthy]
    z_pos = z_h[~healthy]

    l_critic_val = math.nan
    for _ in range(cfg.n_critic):
        l_critic = critic_loss(
            model.critic, z_neg, z_pos, model.critic.cfg, generator=state.alpha_gen
        )
        state.critic_opt.zero_grad(set_to_none=True)
        l_critic.backward()
        state.critic_opt.step()
        l_critic_val = float(l_critic.detach())

    m = model.seg_dec(z_d, skips)
    # Disease rows are re-entangled through the predicted mask; healthy rows
    # decode through the empty mask so R and P coincide for them.
    mask_in = m * (~healthy).to(m.dtype).view(-1, 1, 1, 1, 1)
    if not cfg.mask_gradient:
        mask_in = mask_in.detach()
    r = model.img_dec(z_h, skips, mask_in)

    l_dice = dice_loss(m, gt, cfg.weights.dice_eps)
    l_ce = cross_entropy_loss(m, gt)
    l_recon = recon_loss(x, r)
    l_ph = pseudo_healthy_loss(model.critic, z_pos)
    l_overall = (
        cfg.weights.w_s * (l_dice + l_ce)
        + cfg.weights.w_r * l_recon
        + cfg.weights.w_ph * l_ph
    )
    state.gen_opt.zero_grad(set_to_none=True)
    l_overall.backward()
    state.gen_opt.step()

    state.step += 1
    report = LossReport.build(
        state.step,
        float(l_dice.detach()),
        float(l_ce.detach()),
        float(l_recon.detach()),
        float(l_ph.detach()),
        l_critic_val,
        cfg.weights,
    )
    if not report.is_finite():
        raise NumericError(f"non-finite losses at step {state.step}: {report}")
    return report


def train_step_baseline(
    state: TrainState, x: Tensor, gt: Tensor, healthy: Tensor
) -> LossReport:
    """One update for seg_only / seg_recon / seg_recon_healthy."""
    cfg = state.cfg
    model = state.model
    model.train()

    z_h, z_d, skips = model.encoder(x)
    m = model.seg_dec(z_d, skips)
    l_dice = dice_loss(m, gt, cfg.weights.dice_eps)
    l_ce = cross_entropy_loss(m, gt)
    l_seg = l_dice + l_ce

    l_recon = x.new_zeros(())
    if cfg.method in ("seg_recon", "seg_recon_healthy"):
        r = model.img_dec(z_h, skips, torch.zeros_like(m))
        if cfg.method == "seg_recon":
            l_recon = recon_loss(x, r)
        elif bool(healthy.any()):
            l_recon = recon_loss(x[healthy], r[healthy])

    loss = cfg.weights.w_s * l_seg + cfg.weights.w_r * l_recon
    state.gen_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.gen_opt.step()

    state.step += 1
    report = LossReport.build(
        state.step,
        float(l_dice.detach()),
        float(l_ce.detach()),
        float(l_recon.detach()),
        0.0,
        0.0,
        cfg.weights,
    )
    if not report.is_finite():
        raise NumericError(f"non-finite losses at step {state.step}: {report}")
    return report


def train_step(state: TrainState, x: Tensor, gt: Tensor, healthy: Tensor) -> LossReport:
    if state.cfg.method == "disentangler":
        return train_step_disentangler(state, x, gt, healthy)
    return train_step_baseline(state, x, gt, healthy)


# ---------------------------------------------------------------------------
# data plumbing


def _stack_cases(cases: list[CaseRecord]) -> tuple[Tensor, Tensor, Tensor]:
    vols = np.stack([c.volume for c in cases]).astype(np.float32)
    masks = np.stack([c.gt_mask for c in cases]).astype(np.float32)
    healthy = np.array([c.label == "healthy" for c in cases])
    x = torch.from_numpy(vols)[:, None]
    gt = torch.from_numpy(masks)[:, None]
    return x, gt, torch.from_numpy(healthy)


def make_batches(
    healthy_idx: np.ndarray, disease_idx: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Shuffled batches of exactly healthy_per_batch + disease_per_batch
    cases; the trailing remainder of the longer stream is dropped."""
    h = rng.permutation(healthy_idx)
    d = rng.permutation(disease_idx)
    n = min(len(h) // cfg.healthy_per_batch, len(d) // cfg.disease_per_batch)
    batches = []
    for i in range(n):
        hs = h[i * cfg.healthy_per_batch : (i + 1) * cfg.healthy_per_batch]
        ds = d[i * cfg.disease_per_batch : (i + 1) * cfg.disease_per_batch]
        batches.append(np.concatenate([hs, ds]))
    return batches


def validation_combo(model: DisentangleModel, x: Tensor, gt: Tensor) -> float:
    """Mean segmentation combo loss over cases, evaluated one at a time."""
    was_training = model.training
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(x.shape[0]):
            z_h, z_d, skips = model.encoder(x[i : i + 1])
            m = model.seg_dec(z_d, skips)
            total += float(dice_loss(m, gt[i : i + 1])) + float(
                cross_entropy_loss(m, gt[i : i + 1])
            )
    model.train(was_training)
    return total / x.shape[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: Path | str,
    model: DisentangleModel,
    epoch: int,
    val_combo: float,
) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "config": model.train_cfg.to_dict(),
        "grid_size": model.grid_size,
        "epoch": int(epoch),
        "val_combo": float(val_combo),
    }
    arrays["meta.json"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    write_named_arrays(path, arrays)
    return Path(path)


def load_checkpoint(path: Path | str) -> tuple[DisentangleModel, dict]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    arrays = read_named_arrays(path)
    if "meta.json" not in arrays:
        raise LoadError(f"{path}: missing meta entry")
    meta = json.loads(arrays.pop("meta.json").tobytes().decode("utf-8"))
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        model = DisentangleModel(cfg, int(meta["grid_size"]))
    except (KeyError, TypeError, ValidationError, ConfigurationError) as exc:
        raise LoadError(f"{path}: cannot rebuild model from config ({exc})") from exc
    state = model.state_dict()
    if set(state.keys()) != set(arrays.keys()):
        missing = sorted(set(state) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(state))[:3]
        raise LoadError(f"{path}: checkpoint/config mismatch (missing {missing}, extra {extra})")
    for key, arr in arrays.items():
        if tuple(state[key].shape) != arr.shape:
            raise LoadError(
                f"{path}: {key} shape {arr.shape} != model shape {tuple(state[key].shape)}"
            )
        state[key] = torch.from_numpy(arr.copy()).to(state[key].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# fit


def _write_json(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def fit(cases: list[CaseRecord], cfg: TrainConfig, out_dir: Path | str) -> CheckpointMeta:
    """Train on the train split, select on validation combo loss, persist
    ``best.ckpt``/``last.ckpt`` plus logs, and return the best checkpoint."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_cases = [c for c in cases if c.split == "train"]
    val_cases = [c for c in cases if c.split == "val"]
    if not train_cases:
        raise ConfigurationError("empty train split")
    if not val_cases:
        raise ConfigurationError("empty validation split")
    n_h = sum(c.label == "healthy" for c in train_cases)
    n_d = sum(c.label == "disease" for c in train_cases)
    if n_h < cfg.healthy_per_batch or n_d < cfg.disease_per_batch:
        raise ConfigurationError(
            f"train split has {n_h} healthy / {n_d} disease cases; batches need "
            f"{cfg.healthy_per_batch} + {cfg.disease_per_batch}"
        )
    shapes = {c.volume.shape for c in cases}
    if len(shapes) != 1:
        raise ConfigurationError(f"inconsistent case shapes: {sorted(shapes)}")
    grid = train_cases[0].volume.shape[0]

    torch.manual_seed(cfg.seed)
    state = make_state(cfg, grid)
    batch_rng = np.random.default_rng(cfg.seed + 2)

    x_tr, gt_tr, healthy_tr = _stack_cases(train_cases)
    x_val, gt_val, _ = _stack_cases(val_cases)
    healthy_idx = np.nonzero(healthy_tr.numpy())[0]
    disease_idx = np.nonzero(~healthy_tr.numpy())[0]

    _write_json(out_dir / CONFIG_SNAPSHOT, {"config": cfg.to_dict(), "grid_size": int(grid)})

    best_val = validation_combo(state.model, x_val, gt_val)
    best_epoch = 0
    best_path = save_checkpoint(out_dir / BEST_CKPT, state.model, 0, best_val)

    log_path = out_dir / LOSS_LOG
    with open(log_path, "w") as log:
        log.write(LossReport.tsv_header() + "\n")
        try:
            for epoch in range(1, cfg.epochs + 1):
                for idx in make_batches(healthy_idx, disease_idx, cfg, batch_rng):
                    sel = torch.from_numpy(idx)
                    report = train_step(
                        state, x_tr[sel], gt_tr[sel], healthy_tr[sel]
                    )
                    log.write(report.tsv_line() + "\n")
                    log.flush()
                val = validation_combo(state.model, x_val, gt_val)
                if val < best_val:
                    best_val = val
                    best_epoch = epoch
                    best_path = save_checkpoint(out_dir / BEST_CKPT, state.model, epoch, val)
        except NumericError as exc:
            _write_json(out_dir / DIAGNOSTICS, {"error": str(exc), "step": state.step})
            raise

    final_val = validation_combo(state.model, x_val, gt_val)
    save_checkpoint(out_dir / LAST_CKPT, state.model, cfg.epochs, final_val)
    _write_json(
        out_dir / RUN_META,
        {
            "method": cfg.method,
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "steps": state.step,
            "best_epoch": best_epoch,
            "best_val_combo": best_val,
            "final_val_combo": final_val,
        },
    )
    return CheckpointMeta(epoch=best_epoch, val_combo=best_val, path=best_path)
