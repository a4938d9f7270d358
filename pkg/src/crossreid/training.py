"""Two-stage optimization: generator pretraining, then joint training of the
generation and alignment modules under the weighted overall objective."""

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import alignment as al
from . import generation as gen
from .generation import ArchConfig, GenerationModel
from .synth_data import DatasetManifest, PKSampler, load_batch


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # loss weights
    lambda_cyc: float = 10.0
    lambda_gan: float = 1.0
    lambda_align: float = 1.0
    lambda_reid: float = 1.0
    lambda_recon: float = 10.0
    recon_in_joint: bool = False     # the overall objective omits the reconstruction term
    # re-id losses
    margin: float = 0.3
    triplet_convention: str = "distance"
    # sampler
    p: int = 4
    k: int = 2
    # optimizer / schedule
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    pretrain_epochs: int = 30
    joint_epochs: int = 20
    lr_decay_factor: float = 0.1
    lr_decay_frac: float = 0.6       # decay applied from this fraction of joint epochs
    steps_per_epoch: int = 0         # 0 = ceil(train identities / p)
    # reproducibility
    seed: int = 0
    num_threads: int = 1
    # ablation toggles
    set_level_sharing: bool = True
    instance_level_alignment: bool = True
    stop_gradient_align: bool = False
    gan_mode: str = "lsgan"
    flip_augment: bool = True
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_gan", "lambda_align", "lambda_reid", "lambda_recon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def effective_lambda_align(self):
        return self.lambda_align if self.instance_level_alignment else 0.0

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.5, 0.999)))
        if isinstance(d.get("arch"), dict):
            d["arch"] = ArchConfig.from_dict(d["arch"])
        return cls(**d)


def total_loss(components: dict, config: TrainConfig):
    """Weighted overall objective from already-computed loss components.

    Expects keys cyc, gan, align, cls, triplet (and recon when the
    reconstruction term is enabled); every component must be nonnegative.
    """
    required = ("cyc", "gan", "align", "cls", "triplet")
    for key in required:
        if key not in components:
            raise ValueError(f"missing loss component {key!r}")
    for key, value in components.items():
        if _scalar(value) < 0:
            raise ValueError(f"loss component {key!r} is negative: {_scalar(value)}")
    total = (config.lambda_cyc * components["cyc"]
             + config.lambda_gan * components["gan"]
             + config.effective_lambda_align() * components["align"]
             + config.lambda_reid * (components["cls"] + components["triplet"]))
    if config.recon_in_joint and "recon" in components:
        total = total + config.lambda_recon * components["recon"]
    return total


def setup_determinism(config: TrainConfig):
    torch.set_num_threads(max(1, config.num_threads))
    torch.manual_seed(config.seed)
    return np.random.default_rng(np.random.SeedSequence((config.seed, 2, 0)))


def make_models(config: TrainConfig, num_classes: int):
    generation = GenerationModel(config.arch)
    align_model = al.make_alignment_model(generation, num_classes,
                                          share_set_encoder=config.set_level_sharing,
                                          margin=config.margin)
    return generation, align_model


def _dedup_params(*groups):
    seen = {}
    for group in groups:
        for p in group:
            seen.setdefault(id(p), p)
    return list(seen.values())


def make_optimizers(config: TrainConfig, generation: GenerationModel, align_model: al.AlignmentModel):
    model_params = _dedup_params(generation.generator_parameters(), align_model.parameters())
    opt_model = torch.optim.Adam(model_params, lr=config.lr, betas=config.betas)
    opt_dis = torch.optim.Adam(generation.discriminator_parameters(), lr=config.lr, betas=config.betas)
    return opt_model, opt_dis


@dataclass
class TrainState:
    generation: GenerationModel
    alignment: al.AlignmentModel
    opt_model: torch.optim.Optimizer
    opt_dis: torch.optim.Optimizer
    rng: np.random.Generator
    config: TrainConfig
    num_classes: int
    stage: str = "init"
    pretrain_epochs_done: int = 0
    joint_epochs_done: int = 0
    global_step: int = 0
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, manifest: DatasetManifest) -> TrainState:
    rng = setup_determinism(config)
    generation, align_model = make_models(config, num_classes=len(manifest.train_ids))
    opt_model, opt_dis = make_optimizers(config, generation, align_model)
    return TrainState(generation, align_model, opt_model, opt_dis, rng, config,
                      num_classes=len(manifest.train_ids))


def _steps_per_epoch(config: TrainConfig, manifest: DatasetManifest) -> int:
    if config.steps_per_epoch > 0:
        return config.steps_per_epoch
    return max(1, math.ceil(len(manifest.train_ids) / config.p))


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


class _DivergenceGuard:
    """Aborts after three consecutive steps with any non-finite loss."""

    def __init__(self, state, out_dir):
        self.state = state
        self.out_dir = out_dir
        self.streak = 0

    def check(self, losses: dict):
        values = {k: _scalar(v) for k, v in losses.items()}
        bad = any(not math.isfinite(v) for v in values.values())
        self.streak = self.streak + 1 if bad else 0
        if self.streak >= 3:
            if self.out_dir is not None:
                save_train_state(Path(self.out_dir) / "diverged.pt", self.state)
            raise DivergenceError(f"non-finite losses for {self.streak} consecutive steps: {values}")


def _labels_for(manifest, *batches):
    labels = [manifest.train_label(int(i)) for b in batches for i in b.identities]
    return torch.tensor(labels, dtype=torch.long)


def _generator_step_losses(state: TrainState, batch_rgb, batch_ir, pairing):
    """Shared per-step forward pass; returns quads, codes and the generation losses."""
    quads, codes = gen.exchange_generate_with_codes(state.generation, batch_rgb, batch_ir, pairing)
    cyc = gen.cycle_loss(state.generation, quads)
    adv = gen.adversarial_losses(state.generation, batch_rgb, batch_ir,
                                 quads.x_ir2rgb, quads.x_rgb2ir, mode=state.config.gan_mode)
    return quads, codes, cyc, adv


def _recon_from_codes(state, batch_rgb, batch_ir, codes):
    rec_rgb = gen.decode(state.generation, codes["c_rgb"], codes["s_rgb"], gen.RGB)
    rec_ir = gen.decode(state.generation, codes["c_ir"], codes["s_ir"], gen.IR)
    return (torch.nn.functional.l1_loss(rec_rgb, batch_rgb.pixels)
            + torch.nn.functional.l1_loss(rec_ir, batch_ir.pixels))


def _optimize(state, gen_side_loss, disc_loss):
    # generator/alignment step first, then the discriminators: strict 1:1.
    # opt_model holds no discriminator params and opt_dis no generator params,
    # so neither step can touch the other side.
    state.opt_model.zero_grad(set_to_none=True)
    gen_side_loss.backward()
    state.opt_model.step()
    state.opt_dis.zero_grad(set_to_none=True)
    disc_loss.backward()
    state.opt_dis.step()


def pretrain_generator(config: TrainConfig, manifest: DatasetManifest,
                       out_dir=None, state: TrainState | None = None,
                       until_epoch: int | None = None) -> TrainState:
    """Optimize reconstruction + cycle + adversarial losses before joint training.

    `until_epoch` stops early without altering the configured schedule, so an
    interrupted run can be resumed bitwise-identically.
    """
    if state is None:
        state = init_state(config, manifest)
    state.stage = "pretrain"
    sampler = PKSampler(config.p, config.k)
    steps = _steps_per_epoch(config, manifest)
    guard = _DivergenceGuard(state, out_dir)
    log = _MetricsLog(out_dir)
    end_epoch = config.pretrain_epochs if until_epoch is None else min(until_epoch,
                                                                       config.pretrain_epochs)
    for epoch in range(state.pretrain_epochs_done, end_epoch):
        epoch_losses = []
        for _ in range(steps):
            batch_rgb, batch_ir = load_batch(manifest, sampler, state.rng, flip=config.flip_augment)
            pairing = gen.intra_person_pairing(batch_rgb.identities.numpy(),
                                               batch_ir.identities.numpy(), state.rng)
            quads, codes, cyc, adv = _generator_step_losses(state, batch_rgb, batch_ir, pairing)
            recon = _recon_from_codes(state, batch_rgb, batch_ir, codes)
            gen_total = (config.lambda_recon * recon + config.lambda_cyc * cyc
                         + config.lambda_gan * adv["gen_loss"])
            _optimize(state, gen_total, adv["disc_loss"])
            losses = {"recon": recon, "cyc": cyc, "gan_gen": adv["gen_loss"],
                      "gan_disc": adv["disc_loss"]}
            guard.check(losses)
            state.global_step += 1
            entry = {"stage": "pretrain", "epoch": epoch, "step": state.global_step,
                     **{k: _scalar(v) for k, v in losses.items()}}
            state.history.append(entry)
            epoch_losses.append(entry)
        state.pretrain_epochs_done = epoch + 1
        log.write_epoch(epoch_losses)
    return state


def joint_train(state: TrainState, config: TrainConfig, manifest: DatasetManifest,
                out_dir=None, until_epoch: int | None = None) -> TrainState:
    """Jointly optimize the generation and alignment modules under the overall objective."""
    state.stage = "joint"
    sampler = PKSampler(config.p, config.k)
    steps = _steps_per_epoch(config, manifest)
    guard = _DivergenceGuard(state, out_dir)
    log = _MetricsLog(out_dir)
    decay_at = int(config.joint_epochs * config.lr_decay_frac)
    end_epoch = config.joint_epochs if until_epoch is None else min(until_epoch,
                                                                    config.joint_epochs)
    for epoch in range(state.joint_epochs_done, end_epoch):
        lr = config.lr * (config.lr_decay_factor if epoch >= decay_at else 1.0)
        for opt in (state.opt_model, state.opt_dis):
            for group in opt.param_groups:
                group["lr"] = lr
        epoch_losses = []
        for _ in range(steps):
            batch_rgb, batch_ir = load_batch(manifest, sampler, state.rng, flip=config.flip_augment)
            pairing = gen.intra_person_pairing(batch_rgb.identities.numpy(),
                                               batch_ir.identities.numpy(), state.rng)
            quads, codes, cyc, adv = _generator_step_losses(state, batch_rgb, batch_ir, pairing)

            # re-id features of the real images; under weight sharing the
            # content codes already are the set-level features
            if config.set_level_sharing:
                m_real = torch.cat([codes["c_rgb"], codes["c_ir"]], dim=0)
            else:
                m_real = al.encode_set_level(state.alignment,
                                             torch.cat([batch_rgb.pixels, batch_ir.pixels], dim=0))
            _, v_real = al.encode_instance_level(state.alignment, m_real)
            labels = _labels_for(manifest, batch_rgb, batch_ir)
            cls = al.cls_loss(state.alignment, v_real, labels)
            trip = al.triplet_loss(v_real, labels, margin=config.margin,
                                   convention=config.triplet_convention)

            if config.effective_lambda_align() > 0:
                quads_al = quads.detach_generated() if config.stop_gradient_align else quads
                align = al.align_loss(state.alignment, quads_al, training_mode=True)
            else:
                align = torch.zeros(())

            components = {"cyc": cyc, "gan": adv["gen_loss"], "align": align,
                          "cls": cls, "triplet": trip}
            if config.recon_in_joint:
                components["recon"] = _recon_from_codes(state, batch_rgb, batch_ir, codes)
            joint = total_loss(components, config)
            _optimize(state, joint, adv["disc_loss"])

            losses = {**components, "total": joint, "gan_disc": adv["disc_loss"]}
            guard.check(losses)
            state.global_step += 1
            entry = {"stage": "joint", "epoch": epoch, "step": state.global_step, "lr": lr,
                     **{k: _scalar(v) for k, v in losses.items()}}
            state.history.append(entry)
            epoch_losses.append(entry)
        state.joint_epochs_done = epoch + 1
        log.write_epoch(epoch_losses)
    return state


def train_full(config: TrainConfig, manifest: DatasetManifest, out_dir=None) -> TrainState:
    state = pretrain_generator(config, manifest, out_dir=out_dir)
    state = joint_train(state, config, manifest, out_dir=out_dir)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "model.ckpt", state.generation, state.alignment,
                        config, num_classes=state.num_classes)
    return state


class _MetricsLog:
    """Per-epoch mean losses appended to a line-delimited log file."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / "metrics.jsonl" if out_dir is not None else None

    def write_epoch(self, entries):
        if self.path is None or not entries:
            return
        keys = [k for k in entries[0] if isinstance(entries[0][k], float)]
        mean = {k: sum(e[k] for e in entries) / len(entries) for k in keys}
        record = {"stage": entries[0]["stage"], "epoch": entries[0]["epoch"],
                  "steps": len(entries), **mean}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def save_checkpoint(path, generation: GenerationModel, align_model: al.AlignmentModel,
                    config: TrainConfig, num_classes: int):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "num_classes": num_classes,
        "generation": generation.state_dict(),
        "alignment": align_model.state_dict(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    config = TrainConfig.from_dict(payload["config"])
    generation, align_model = make_models(config, payload["num_classes"])
    generation.load_state_dict(payload["generation"])
    align_model.load_state_dict(payload["alignment"])
    return generation, align_model, config


def save_train_state(path, state: TrainState):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "num_classes": state.num_classes,
        "generation": state.generation.state_dict(),
        "alignment": state.alignment.state_dict(),
        "opt_model": state.opt_model.state_dict(),
        "opt_dis": state.opt_dis.state_dict(),
        "rng_state": state.rng.bit_generator.state,
        "stage": state.stage,
        "pretrain_epochs_done": state.pretrain_epochs_done,
        "joint_epochs_done": state.joint_epochs_done,
        "global_step": state.global_step,
        "history": state.history,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_train_state(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"train state not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig.from_dict(payload["config"])
    torch.set_num_threads(max(1, config.num_threads))
    generation, align_model = make_models(config, payload["num_classes"])
    generation.load_state_dict(payload["generation"])
    align_model.load_state_dict(payload["alignment"])
    opt_model, opt_dis = make_optimizers(config, generation, align_model)
    opt_model.load_state_dict(payload["opt_model"])
    opt_dis.load_state_dict(payload["opt_dis"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    state = TrainState(generation, align_model, opt_model, opt_dis, rng, config,
                       num_classes=payload["num_classes"], stage=payload["stage"],
                       pretrain_epochs_done=payload["pretrain_epochs_done"],
                       joint_epochs_done=payload["joint_epochs_done"],
                       global_step=payload["global_step"], history=list(payload["history"]))
    return state


def sweep_lambda_align(values, config: TrainConfig, manifest: DatasetManifest,
                       repeats: int = 10, eval_seed: int = 100) -> list:
    """Train one model per lambda_align value and evaluate each; returns one row per value."""
    from .evaluation import evaluate_protocol  # local import to avoid a module cycle

    if any(v < 0 for v in values):
        raise ValueError("lambda_align values must be nonnegative")
    rows = []
    for value in values:
        cfg = TrainConfig.from_dict(config.to_dict())
        cfg.lambda_align = float(value)
        cfg.instance_level_alignment = value > 0
        state = train_full(cfg, manifest)
        report = evaluate_protocol(state.alignment, manifest, shot="single",
                                   repeats=repeats, seed=eval_seed)
        rows.append({"lambda_align": float(value), "rank1": report.cmc_mean[0],
                     "mAP": report.map_mean})
    return rows
