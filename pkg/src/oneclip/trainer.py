"""Generator fine-tuning: alternating schedule, discriminator updates, checkpoints."""

from __future__ import annotations

import copy
import dataclasses
import io
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .core_types import (
    ArgumentError,
    LatentCode,
    NonFiniteError,
    RandomSource,
    VersionError,
)
from .embedding import Embedder, make_embedder, sample_patch_locations, PatchSpec
from .generator import (
    MAPPING,
    TORGB,
    Discriminator,
    StyleGenerator,
    build_discriminator,
    clone_generator,
    freeze,
    no_param_grad,
    patch_score,
    global_score,
    sample_w,
    synthesize,
    trainable_parameters,
)
from .latent_search import SearchConfig, invert_image, invert_text
from .losses import (
    ADV_MODES,
    CON_METRICS,
    LossWeights,
    adv_discriminator,
    r1_penalty,
    rand_terms,
    reference_terms,
    text_terms,
)
from .perceptual import make_perceptual
from .presets import (
    LAMBDA_REG,
    LEARNING_RATE,
    TEXT_ITERATIONS,
    TEXT_SOURCE,
    DatasetPreset,
    get_preset,
)

CHECKPOINT_FORMAT = "oneclip-state"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AdaptationConfig:
    preset: DatasetPreset = field(default_factory=lambda: get_preset("toy"))
    weights: LossWeights = LossWeights()
    lambda_reg: float = LAMBDA_REG
    learning_rate: float = LEARNING_RATE
    total_iterations: int | None = None
    batch_size: int | None = None
    schedule: tuple[int, int] = (3, 1)
    seed: int = 0
    embedder: str = "fake"
    embedder_path: str | None = None
    perceptual: str = "toy"
    freeze: tuple[str, ...] = (TORGB, MAPPING)
    betas: tuple[float, float] = (0.0, 0.99)
    con_metric: str = "sq"
    adv_mode: str = "literal"
    r1_gamma: float = 10.0
    patch_negatives: int | None = None
    search_steps: int = 500
    search_step_size: float = 0.02
    mean_samples: int = 10_000
    source_text: str = TEXT_SOURCE

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be positive")
        if self.total_iterations is not None and self.total_iterations < 1:
            raise ArgumentError("total_iterations must be at least 1")
        n_rand, n_ref = self.schedule
        if n_rand < 0 or n_ref < 0 or n_rand + n_ref < 1:
            raise ArgumentError(f"bad schedule {self.schedule}")
        if self.con_metric not in CON_METRICS:
            raise ArgumentError(f"con_metric must be one of {CON_METRICS}")
        if self.adv_mode not in ADV_MODES:
            raise ArgumentError(f"adv_mode must be one of {ADV_MODES}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ArgumentError("batch_size must be at least 2 for the consistency loss")

    @property
    def iterations(self) -> int:
        return self.total_iterations or self.preset.default_iterations

    @property
    def text_iterations(self) -> int:
        return self.total_iterations or TEXT_ITERATIONS

    @property
    def batch(self) -> int:
        return self.batch_size or self.preset.batch_size

    @property
    def negatives(self) -> int:
        return self.patch_negatives or self.preset.patch_negatives

    @property
    def search(self) -> SearchConfig:
        return SearchConfig(
            lambda_reg=self.lambda_reg,
            steps=self.search_steps,
            step_size=self.search_step_size,
            mean_samples=self.mean_samples,
        )

    def phase(self, iteration: int) -> str:
        n_rand, n_ref = self.schedule
        return "rand" if iteration % (n_rand + n_ref) < n_rand else "ref"

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "preset":
                for pf in dataclasses.fields(value):
                    flat[f"preset.{pf.name}"] = getattr(value, pf.name)
            elif f.name == "weights":
                flat["lambda_con"] = value.lambda_con
                flat["lambda_patch"] = value.lambda_patch
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "AdaptationConfig":
        flat = dict(flat)
        preset_kw = {k[7:]: flat.pop(k) for k in list(flat) if k.startswith("preset.")}
        preset_kw["patch_layers"] = tuple(preset_kw["patch_layers"])
        weights = LossWeights(flat.pop("lambda_con"), flat.pop("lambda_patch"))
        for key in ("schedule", "freeze", "betas"):
            flat[key] = tuple(flat[key])
        return cls(preset=DatasetPreset(**preset_kw), weights=weights, **flat)


@dataclass
class TrainState:
    """Snapshot of a run; everything needed to resume bit-exactly."""

    iteration: int
    config: dict
    mode: str
    generator_spec: dict
    generator: dict
    g_optimizer: dict
    w_ref: torch.Tensor
    rng_state: torch.Tensor
    discriminator_spec: dict | None = None
    discriminator: dict | None = None
    d_optimizer: dict | None = None
    target_text: str | None = None
    history: list[tuple[int, str, float]] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)

    @property
    def adaptation_config(self) -> AdaptationConfig:
        return AdaptationConfig.from_flat(self.config)

    def build_generator(self) -> StyleGenerator:
        gen = StyleGenerator(**self.generator_spec)
        gen.load_state_dict(self.generator)
        return gen

    def build_discriminator(self) -> Discriminator | None:
        if self.discriminator is None:
            return None
        disc = Discriminator(**self.discriminator_spec)
        disc.load_state_dict(self.discriminator)
        return disc

    def loss_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for p in self.phases:
            counts[p] = counts.get(p, 0) + 1
        return counts


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    """Atomically write ``state`` (temp file + rename)."""
    path = Path(path)
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **dataclasses.asdict(state)}
    payload["history"] = [list(h) for h in state.history]
    buf = io.BytesIO()
    torch.save(payload, buf)  # in-memory, so the archive name does not depend on the temp path
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001 - any unpickling failure means a bad file
        raise VersionError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {payload.get('version')} != {CHECKPOINT_VERSION}")
    payload.pop("format")
    payload.pop("version")
    payload["history"] = [tuple(h) for h in payload["history"]]
    return TrainState(**payload)


def _clone_state(sd: dict) -> dict:
    return copy.deepcopy(sd)


class Trainer:
    """Owns the adapted generator, discriminator, optimizers and the training RNG.

    ``mode`` is ``"image"`` (alternating rand/ref phases with a discriminator)
    or ``"text"`` (a single text loss, no discriminator).
    """

    def __init__(
        self,
        G_s: StyleGenerator,
        cfg: AdaptationConfig,
        w_ref: LatentCode | torch.Tensor,
        I_trg: torch.Tensor | None = None,
        embedder: Embedder | None = None,
        perceptual=None,
        D: Discriminator | None = None,
        mode: str = "image",
        target_text: str | None = None,
    ):
        if mode not in ("image", "text"):
            raise ArgumentError(f"unknown mode {mode!r}")
        if mode == "image" and I_trg is None:
            raise ArgumentError("image adaptation needs a target image")
        if mode == "text" and not target_text:
            raise ArgumentError("text adaptation needs a target prompt")
        self.cfg = cfg
        self.mode = mode
        self.target_text = target_text
        self.G_s = G_s.eval().requires_grad_(False)
        self.dtype = next(G_s.parameters()).dtype
        self.I_trg = None if I_trg is None else I_trg.to(self.dtype)
        self.embedder = embedder or make_embedder(cfg.embedder, cfg.embedder_path, seed=cfg.seed)
        self.perceptual = perceptual if perceptual is not None else make_perceptual(cfg.perceptual, cfg.seed)
        data = w_ref.data if isinstance(w_ref, LatentCode) else w_ref
        self.w_ref = LatentCode.w(data.detach().to(self.dtype).reshape(-1))
        self.G_t = freeze(clone_generator(G_s), cfg.freeze)
        self.opt_g = torch.optim.Adam(
            trainable_parameters(self.G_t), lr=cfg.learning_rate, betas=cfg.betas
        )
        self.D = None
        self.opt_d = None
        if mode == "image":
            self.D = D if D is not None else build_discriminator(cfg.preset, cfg.seed).to(self.dtype)
            for l in cfg.preset.patch_layers:
                if str(l) not in self.D.patch_heads:
                    self.D.add_patch_head(l)
            self.D.to(self.dtype)
            self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
        self.rng = RandomSource(cfg.seed, 7).generator()
        self.iteration = 0
        self.history: list[tuple[int, str, float]] = []
        self.phases: list[str] = []

    @property
    def total_iterations(self) -> int:
        return self.cfg.text_iterations if self.mode == "text" else self.cfg.iterations

    def _sample(self):
        preset = self.cfg.preset
        with torch.no_grad():
            latents = LatentCode.w(sample_w(self.G_s, self.rng, self.cfg.batch).data)
        specs = [
            PatchSpec(
                preset.patch_size,
                tuple(sample_patch_locations(self.rng, preset.resolution, preset.patch_size, self.cfg.negatives)),
            )
            for _ in range(len(latents))
        ]
        return latents, specs

    def _generator_step(self, terms: dict, weights: dict) -> float:
        loss = sum(weights.get(k, 1.0) * v for k, v in terms.items())
        value = loss.item()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"{self.phases[-1] if self.phases else 'loss'} became {value} at iteration {self.iteration}")
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()
        return value

    def _discriminator_step(self, fake: torch.Tensor, score_fn) -> float:
        real = self.I_trg
        r1 = r1_penalty(score_fn, real) if self.cfg.r1_gamma else 0.0
        loss = adv_discriminator(score_fn(fake).mean(), score_fn(real).mean(), r1, self.cfg.r1_gamma)
        loss = loss.mean()
        value = loss.item()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"discriminator loss became {value} at iteration {self.iteration}")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return value

    def step(self) -> None:
        i = self.iteration
        cfg = self.cfg
        if self.mode == "text":
            latents, specs = self._sample()
            terms = text_terms(
                self.G_s, self.G_t, self.embedder, latents, self.w_ref, specs,
                cfg.source_text, self.target_text, cfg.con_metric,
            )
            self.phases.append("text")
            value = self._generator_step(terms, {})
            self._log(i, "text", value, terms)
            self.iteration += 1
            return

        phase = cfg.phase(i)
        self.phases.append(phase)
        layers = cfg.preset.patch_layers
        if phase == "rand":
            latents, specs = self._sample()
            with no_param_grad(self.D):
                terms = rand_terms(
                    self.G_s, self.G_t, self.embedder, latents, specs, self.D, self.I_trg,
                    layers, cfg.con_metric, cfg.adv_mode,
                )
                value = self._generator_step(
                    terms, {"con": cfg.weights.lambda_con, "patch": cfg.weights.lambda_patch}
                )
            with torch.no_grad():
                fake = synthesize(self.G_t, latents)
            d_value = self._discriminator_step(fake, lambda x: patch_score(self.D, x, layers))
            d_name = "d_patch"
        else:
            with no_param_grad(self.D):
                terms = reference_terms(
                    self.G_t, self.w_ref, self.I_trg, self.perceptual, self.D, cfg.adv_mode
                )
                value = self._generator_step(terms, {})
            with torch.no_grad():
                fake = synthesize(self.G_t, self.w_ref)
            d_value = self._discriminator_step(fake, lambda x: global_score(self.D, x))
            d_name = "d_glob"
        self._log(i, phase, value, terms)
        self.history.append((i, d_name, d_value))
        self.iteration += 1

    def _log(self, i, name, value, terms):
        self.history.append((i, name, value))
        for k, v in terms.items():
            self.history.append((i, f"{name}.{k}", v.item()))

    def run(
        self,
        until: int | None = None,
        checkpoint_path: str | os.PathLike | None = None,
        checkpoint_every: int = 0,
        callback: Callable[["Trainer"], None] | None = None,
    ) -> TrainState:
        """Train until ``until`` (default: the configured total) iterations have run."""
        until = self.total_iterations if until is None else min(until, self.total_iterations)
        while self.iteration < until:
            self.step()
            if callback is not None:
                callback(self)
            if checkpoint_path and checkpoint_every and self.iteration % checkpoint_every == 0:
                save_checkpoint(self.state(), checkpoint_path)
        state = self.state()
        if checkpoint_path:
            save_checkpoint(state, checkpoint_path)
        return state

    def state(self) -> TrainState:
        return TrainState(
            iteration=self.iteration,
            config=self.cfg.to_flat(),
            mode=self.mode,
            generator_spec=dict(self.G_t.spec),
            generator=_clone_state(self.G_t.state_dict()),
            g_optimizer=_clone_state(self.opt_g.state_dict()),
            w_ref=self.w_ref.data.clone(),
            rng_state=self.rng.get_state(),
            discriminator_spec=None if self.D is None else dict(self.D.spec),
            discriminator=None if self.D is None else _clone_state(self.D.state_dict()),
            d_optimizer=None if self.opt_d is None else _clone_state(self.opt_d.state_dict()),
            target_text=self.target_text,
            history=list(self.history),
            phases=list(self.phases),
        )

    @classmethod
    def from_state(
        cls,
        G_s: StyleGenerator,
        state: TrainState,
        I_trg: torch.Tensor | None = None,
        embedder: Embedder | None = None,
        perceptual=None,
    ) -> "Trainer":
        cfg = state.adaptation_config
        D = state.build_discriminator()
        trainer = cls(
            G_s, cfg, state.w_ref, I_trg, embedder, perceptual, D, state.mode, state.target_text
        )
        trainer.G_t.load_state_dict(state.generator)
        trainer.opt_g.load_state_dict(state.g_optimizer)
        if trainer.opt_d is not None:
            trainer.opt_d.load_state_dict(state.d_optimizer)
        trainer.rng.set_state(state.rng_state)
        trainer.iteration = state.iteration
        trainer.history = list(state.history)
        trainer.phases = list(state.phases)
        return trainer


def adapt(
    G_s: StyleGenerator,
    I_trg: torch.Tensor,
    cfg: AdaptationConfig = AdaptationConfig(),
    embedder: Embedder | None = None,
    perceptual=None,
    D: Discriminator | None = None,
    **run_kwargs,
) -> TrainState:
    """Reference search followed by alternating fine-tuning."""
    dtype = next(G_s.parameters()).dtype
    embedder = embedder or make_embedder(cfg.embedder, cfg.embedder_path, seed=cfg.seed)
    perceptual = perceptual if perceptual is not None else make_perceptual(cfg.perceptual, cfg.seed)
    search = invert_image(G_s, embedder, perceptual, I_trg.to(dtype), cfg.search, RandomSource(cfg.seed, 1))
    trainer = Trainer(G_s, cfg, search.latent, I_trg, embedder, perceptual, D)
    return trainer.run(**run_kwargs)


def adapt_text(
    G_s: StyleGenerator,
    t_trg: str,
    cfg: AdaptationConfig = AdaptationConfig(),
    embedder: Embedder | None = None,
    **run_kwargs,
) -> TrainState:
    """Text-conditioned reference search followed by text-loss fine-tuning (no discriminator)."""
    embedder = embedder or make_embedder(cfg.embedder, cfg.embedder_path, seed=cfg.seed)
    search = invert_text(G_s, embedder, t_trg, cfg.search, RandomSource(cfg.seed, 1))
    trainer = Trainer(G_s, cfg, search.latent, embedder=embedder, mode="text", target_text=t_trg)
    return trainer.run(**run_kwargs)


def held_out_similarity_variance(gen, embedder: Embedder, rng: RandomSource, n_pairs: int = 50) -> float:
    """Variance of cosine similarities over ``n_pairs`` disjoint pairs of generated images."""
    with torch.no_grad():
        w = sample_w(gen, rng, 2 * n_pairs)
        emb = embedder.embed_image(synthesize(gen, w))
        sims = (emb[0::2] * emb[1::2]).sum(-1)
    return sims.var().item()
