"""Adam, the alternating WGAN-GP loop for the two generators and the critic, and phase scheduling."""

from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .data_io import array_digest, batch_indices
from .geometry import radon_forward
from .losses import (
    LossWeights,
    critic_objective,
    generator_objective,
    generator_terms,
    gradient_penalty,
)
from .networks import DNA, DNAConfig, critic_forward, load_checkpoint, save_checkpoint

LOSS_COLUMNS = (
    "iteration",
    "critic_loss",
    "gen_total",
    "mse1",
    "mse2",
    "ssim1",
    "ssim2",
    "sino1",
    "sino2",
    "adv1",
    "adv2",
    "gp",
)
PHASES = ("pretrain", "finetune")


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf; training stops."""


@dataclass
class TrainConfig:
    batch_size: int = 10
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    critic_updates: int = 4
    max_iterations: int = 1000
    seed: int = 0
    checkpoint_every: int = 0  # 0: initial and final checkpoints only
    loss_weights: LossWeights = field(default_factory=LossWeights)
    phase: str = "finetune"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.critic_updates < 1:
            raise ValueError(f"critic_updates must be >= 1, got {self.critic_updates}")
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if isinstance(self.loss_weights, Mapping):
            self.loss_weights = LossWeights(**self.loss_weights)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus the step counter."""

    m: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, torch.Tensor]) -> "AdamState":
        return cls(
            OrderedDict((k, torch.zeros_like(p, dtype=p.dtype).detach()) for k, p in params.items()),
            OrderedDict((k, torch.zeros_like(p, dtype=p.dtype).detach()) for k, p in params.items()),
            0,
        )

    def to_tensors(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        out[f"{prefix}.step"] = torch.tensor(float(self.step))
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str, params: Mapping[str, torch.Tensor]):
        try:
            state = cls(step=int(tensors[f"{prefix}.step"]))
            for k, p in params.items():
                state.m[k] = torch.from_numpy(np.array(tensors[f"{prefix}.m.{k}"])).to(p.dtype).reshape(p.shape)
                state.v[k] = torch.from_numpy(np.array(tensors[f"{prefix}.v.{k}"])).to(p.dtype).reshape(p.shape)
        except KeyError as exc:
            raise ValueError(f"checkpoint lacks optimizer record {exc}") from exc
        return state


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: AdamState,
    config: TrainConfig,
) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves parameters and moments untouched. A missing gradient
    (``None``) counts as zero.
    """
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NonFiniteError(f"non-finite gradient for {k} ({bad} entries) at Adam step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = torch.zeros_like(p)
            if k not in state.m:
                state.m[k] = torch.zeros_like(p)
                state.v[k] = torch.zeros_like(p)
            m, v = state.m[k], state.v[k]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(config.lr * (m / c1) / ((v / c2).sqrt() + config.eps))
    return state


# --------------------------------------------------------------------------
# training loop


def iteration_generator(seed: int, iteration: int) -> torch.Generator:
    """Random stream for one iteration, so resumed runs draw the same numbers."""
    gen = torch.Generator()
    gen.manual_seed(int(np.random.SeedSequence([seed, iteration]).generate_state(1, dtype=np.uint64)[0] >> 1))
    return gen


@dataclass
class TrainResult:
    model: DNA
    history: list[dict]
    gen_state: AdamState
    critic_state: AdamState
    iteration: int
    checkpoints: list[Path] = field(default_factory=list)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_loss_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["iteration"]] + [_fmt(row[c]) for c in LOSS_COLUMNS[1:]])


def _grads(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor | None]:
    names = list(params)
    gs = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
    return dict(zip(names, gs))


def _checkpoint_path(out_dir: Path, iteration: int) -> Path:
    return out_dir / f"ckpt_{iteration:06d}.dna"


def _save(path: Path, model: DNA, gen_state: AdamState, critic_state: AdamState, iteration: int) -> Path:
    extra = OrderedDict()
    extra["train.iteration"] = torch.tensor(float(iteration))
    extra.update(gen_state.to_tensors("adam.gen"))
    extra.update(critic_state.to_tensors("adam.critic"))
    save_checkpoint(path, model, extra)
    return path


def resume_state(path) -> tuple[DNA, AdamState, AdamState, int]:
    """Model, both optimizer states and the completed-iteration count stored in a training checkpoint."""
    model, extra = load_checkpoint(path)
    if "train.iteration" not in extra:
        raise ValueError(f"{path}: not a training checkpoint (no iteration record)")
    gen_state = AdamState.from_tensors(extra, "adam.gen", model.generator_parameters())
    critic_state = AdamState.from_tensors(extra, "adam.critic", model.critic_parameters())
    return model, gen_state, critic_state, int(extra["train.iteration"])


def _project(images: torch.Tensor, model: DNA) -> torch.Tensor:
    return radon_forward(images, model.geo)


def train_loop(
    images,
    model: DNA,
    config: TrainConfig,
    out_dir=None,
    gen_state: AdamState | None = None,
    critic_state: AdamState | None = None,
    start_iteration: int = 0,
) -> TrainResult:
    """Alternate ``critic_updates`` critic steps with one joint step of both generators.

    ``images[M, N, N]`` are ground-truth images; sinograms are synthesised per
    batch. Every random draw of iteration ``t`` (batch choice, penalty
    interpolation) derives from ``(config.seed, t)``, so continuing from a
    checkpoint written after iteration ``t`` reproduces the uninterrupted run.
    Each loss row holds the values computed during that iteration, before its
    generator update. ``out_dir`` receives ``losses.csv`` and checkpoints
    ``ckpt_XXXXXX.dna`` (index = completed iterations).
    """
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if images.dim() != 3 or images.shape[0] == 0:
        raise ValueError(f"training images must be a nonempty [M, N, N] stack, got {tuple(images.shape)}")
    n = model.geo.image_size
    if tuple(images.shape[1:]) != (n, n):
        raise ValueError(f"images are {tuple(images.shape[1:])}, model expects {(n, n)}")
    gparams = model.generator_parameters()
    cparams = model.critic_parameters()
    gen_state = gen_state or AdamState.for_params(gparams)
    critic_state = critic_state or AdamState.for_params(cparams)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, [], gen_state, critic_state, start_iteration)
    if out is not None and start_iteration == 0:
        result.checkpoints.append(_save(_checkpoint_path(out, 0), model, gen_state, critic_state, 0))

    m_items = images.shape[0]
    draws = config.critic_updates + 1
    w = config.loss_weights
    for t in range(start_iteration, config.max_iterations):
        rng = iteration_generator(config.seed, t)

        def batch(k: int):
            idx = torch.from_numpy(batch_indices(m_items, config.batch_size, t * draws + k, config.seed))
            truth = images[idx][:, None]
            return truth, _project(truth, model)

        try:
            for k in range(config.critic_updates):
                truth, sino = batch(k)
                with torch.no_grad():
                    fbp_img, g1_img, g2_img = model(sino)
                fakes = torch.cat([g1_img, g2_img])
                b = truth.shape[0]
                scores_real = critic_forward(truth, model.critic)
                scores_fake = critic_forward(fakes, model.critic)
                gp = gradient_penalty(model.critic, torch.cat([truth, truth]), fakes, rng)
                c_loss = critic_objective(scores_real, scores_fake[:b], scores_fake[b:], gp, w.lambda_gp)
                _require_finite(c_loss, "critic loss", t)
                adam_step(cparams, _grads(c_loss, cparams), critic_state, config)

            truth, sino = batch(config.critic_updates)
            fbp_img, g1_img, g2_img = model(sino)
            terms = generator_terms(
                truth, sino, g1_img, g2_img, model.geo,
                critic_forward(g1_img, model.critic), critic_forward(g2_img, model.critic),
            )
            g_loss = generator_objective(terms, w)
            _require_finite(g_loss, "generator loss", t)
            adam_step(gparams, _grads(g_loss, gparams), gen_state, config)
        except NonFiniteError:
            if out is not None:
                _save(out / f"diagnostic_{t:06d}.dna", model, gen_state, critic_state, t)
            raise

        row = {"iteration": t, "critic_loss": float(c_loss.detach()), "gen_total": float(g_loss.detach()), "gp": float(gp.detach())}
        row.update(terms.as_floats())
        result.history.append(row)
        result.iteration = t + 1
        if out is not None and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            result.checkpoints.append(_save(_checkpoint_path(out, t + 1), model, gen_state, critic_state, t + 1))

    if out is not None:
        final = _checkpoint_path(out, result.iteration)
        if not result.checkpoints or result.checkpoints[-1] != final:
            result.checkpoints.append(_save(final, model, gen_state, critic_state, result.iteration))
        write_loss_csv(out / "losses.csv", result.history)
    return result


def _require_finite(loss: torch.Tensor, what: str, t: int) -> None:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is {value} at iteration {t}")


def evaluate_generator_loss(model: DNA, images, weights: LossWeights | None = None) -> float:
    """Generator objective of ``model`` on a fixed image set, without updating anything."""
    weights = weights or LossWeights()
    truth = torch.as_tensor(np.asarray(images, dtype=np.float32))[:, None]
    with torch.no_grad():
        sino = _project(truth, model)
        _, g1_img, g2_img = model(sino)
        terms = generator_terms(
            truth, sino, g1_img, g2_img, model.geo,
            critic_forward(g1_img, model.critic), critic_forward(g2_img, model.critic),
        )
        return float(generator_objective(terms, weights))


# --------------------------------------------------------------------------
# pre-training schedule


def pretrain_then_finetune(
    natural_images,
    ct_images,
    model: DNA,
    pretrain: TrainConfig,
    finetune: TrainConfig,
    out_dir=None,
    run_config: Mapping | None = None,
) -> tuple[DNA, dict]:
    """Train on the natural-image corpus, then continue on the CT corpus.

    Both Adam states are reset at the phase boundary. With
    ``pretrain.max_iterations == 0`` this is a plain ``train_loop`` on the CT
    corpus. Returns the model and the run manifest (also written as
    ``manifest.json`` when ``out_dir`` is given).
    """
    out = Path(out_dir) if out_dir is not None else None
    manifest: dict = {"config": dict(run_config or {}), "model": model.config.to_dict(), "phases": []}
    corpora = (("pretrain", natural_images, pretrain), ("finetune", ct_images, finetune))
    for phase, imgs, cfg in corpora:
        if phase == "pretrain" and cfg.max_iterations == 0:
            continue
        if imgs is None or len(imgs) == 0:
            raise ValueError(f"{phase} corpus is empty")
        phase_dir = out / phase if out is not None else None
        res = train_loop(imgs, model, cfg, phase_dir)
        manifest["phases"].append(
            {
                "phase": phase,
                "corpus_sha256": array_digest(np.asarray(imgs, dtype=np.float32)),
                "corpus_size": int(len(imgs)),
                "seed": cfg.seed,
                "iterations": res.iteration,
                "train_config": cfg.to_dict(),
                "losses": str(phase_dir / "losses.csv") if phase_dir is not None else None,
                "checkpoints": [str(p) for p in res.checkpoints],
                "initial_gen_loss": res.history[0]["gen_total"] if res.history else None,
            }
        )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return model, manifest


def build_model(config: DNAConfig, seed: int = 0) -> DNA:
    return DNA(config, seed=seed)
