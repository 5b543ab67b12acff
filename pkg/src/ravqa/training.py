"""Adam training loop with per-epoch checkpoints and bitwise-reproducible resume.

Every batch runs the full pipeline per sample (text encoding, image encoding,
gated fusion, teacher-forced decoding), sums the token losses, and steps Adam
on the token-mean loss. Shuffling draws a fresh generator from (seed, epoch),
so an interrupted run continued from a checkpoint walks the exact same batch
sequence as an uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import data as dat
from .autodiff import Tape, Tensor
from .errors import CheckpointError, ContractViolation, DataError, DivergenceError
from .model import GatedFusionModel, ModelConfig
from .strategies import Strategy, make_target, stage2_input_text
from .tensorstore import load_tensors, save_tensors

# Default epoch budgets keyed by dataset short name.
EPOCH_PRESETS = {"r-rad": 150, "r-slake": 300, "r-path": 50}

_BETA1 = 0.9
_BETA2 = 0.999
_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the stage2_* pair applies to answer-stage fits."""

    strategy: str = Strategy.NO_RATIONALE.value
    epochs: int = 60
    batch_size: int = 32
    lr: float = 5e-4
    seed: int = 0
    grad_clip: float | None = None
    stage2_lr: float = 5e-5
    stage2_epochs: int = 20

    def __post_init__(self):
        try:
            Strategy(self.strategy)
        except ValueError:
            known = ", ".join(s.value for s in Strategy)
            raise ContractViolation(f"unknown strategy {self.strategy!r}; expected one of {known}") from None
        if self.epochs < 1 or self.stage2_epochs < 1:
            raise ContractViolation(f"epoch counts must be at least 1, got {self.epochs}/{self.stage2_epochs}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be at least 1, got {self.batch_size}")
        if self.lr <= 0 or self.stage2_lr <= 0:
            raise ContractViolation(f"learning rates must be positive, got {self.lr}/{self.stage2_lr}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ContractViolation(f"grad_clip must be positive when set, got {self.grad_clip}")
        if self.seed < 0:
            raise ContractViolation(f"seed must be non-negative, got {self.seed}")


@dataclass
class TrainReport:
    strategy: str
    stage: int | None
    epochs: int
    batch_size: int
    lr: float
    seed: int
    samples: int
    epoch_losses: list[float]
    final_loss: float
    param_hash: str

    def echo(self) -> str:
        """One effective-config line for logs and the command line."""
        parts = [f"strategy={self.strategy}"]
        if self.stage is not None:
            parts.append(f"stage={self.stage}")
        parts += [
            f"epochs={self.epochs}",
            f"batch_size={self.batch_size}",
            f"lr={self.lr:g}",
            f"seed={self.seed}",
            f"samples={self.samples}",
            f"final_loss={self.final_loss:.6f}",
        ]
        return " ".join(parts)


class Adam:
    """Adam with bias correction over a live parameter dict.

    step() consumes the .grad slots (clipping the global norm first when
    configured) and clears them; m/v moments live here and round-trip
    through checkpoints under opt.m.* / opt.v.* names.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, grad_clip: float | None = None):
        if not params:
            raise ContractViolation("Adam needs at least one parameter")
        self.params = params
        self.lr = float(lr)
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {name: np.zeros(p.data.size) for name, p in params.items()}
        self.v = {name: np.zeros(p.data.size) for name, p in params.items()}

    def step(self) -> None:
        grads: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractViolation(f"parameter {name!r} has no gradient; run backward first")
            grads[name] = p.grad.reshape(p.data.shape)
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {name: g * scale for name, g in grads.items()}
        self.t += 1
        c1 = 1.0 - _BETA1 ** self.t
        c2 = 1.0 - _BETA2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= _BETA1
            m += (1.0 - _BETA1) * g
            v *= _BETA2
            v += (1.0 - _BETA2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + _EPS)
            p.grad = None

    def state_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.params.items():
            out[f"opt.m.{name}"] = Tensor(p.shape, self.m[name].copy())
            out[f"opt.v.{name}"] = Tensor(p.shape, self.v[name].copy())
        return out

    def load_state(self, tensors: dict[str, Tensor], step: int) -> None:
        for name, p in self.params.items():
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                key = prefix + name
                if key not in tensors:
                    raise CheckpointError(f"checkpoint lacks optimizer tensor {key!r}")
                data = tensors[key].data
                if data.size != p.data.size:
                    raise CheckpointError(f"optimizer tensor {key!r} has size {data.size}, expected {p.data.size}")
                store[name] = data.copy()
        self.t = int(step)


def training_pairs(
    samples: Sequence[dat.VqaSample],
    strategy: Strategy | str,
    stage: int | None = None,
) -> list[tuple[dat.VqaSample, str, str]]:
    """(sample, input text, target text) triples for one strategy.

    Strategies that serialize a rationale refuse samples without one; silence
    there would train a wrong objective.
    """
    strategy = Strategy(strategy)
    if strategy is Strategy.TWO_STAGE:
        if stage not in (1, 2):
            raise ContractViolation("two-stage training pairs need stage=1 or stage=2")
    elif stage is not None:
        raise ContractViolation(f"stage applies only to the two-stage strategy, not {strategy.value}")
    needs_rationale = strategy is not Strategy.NO_RATIONALE
    pairs = []
    for sample in samples:
        if needs_rationale and not (sample.rationale and sample.rationale.strip()):
            raise DataError(f"sample {sample.id!r} lacks a rationale, required by {strategy.value}")
        if strategy is Strategy.TWO_STAGE and stage == 2:
            inp = stage2_input_text(sample.question, sample.rationale)
        else:
            inp = sample.question
        target = make_target(strategy, sample.answer, sample.rationale, stage=stage)
        pairs.append((sample, inp, target))
    return pairs


@dataclass
class _Example:
    """One sample pre-tokenized: ids in, teacher-forced prefix, next-token targets."""

    input_ids: list[int]
    prefix: list[int]
    targets: list[int]
    image: np.ndarray


def _prepare(
    vocab: dat.Vocab,
    pairs: Sequence[tuple[dat.VqaSample, str, str]],
    n_max: int,
) -> list[_Example]:
    examples = []
    for sample, inp, target in pairs:
        ids, mask = dat.encode(vocab, inp, n_max)
        real = [i for i, keep in zip(ids, mask) if keep]
        tgt = [vocab.id_of(tok) for tok in dat.tokenize(target)]
        if len(tgt) + 1 > n_max:
            raise DataError(
                f"sample {sample.id!r}: target needs {len(tgt) + 1} positions but n_max is {n_max}"
            )
        examples.append(_Example(real, [dat.BOS_ID] + tgt, tgt + [dat.EOS_ID], sample.grid()))
    return examples


def _train(
    model: GatedFusionModel,
    examples: list[_Example],
    config: TrainConfig,
    lr: float,
    epochs: int,
    start_epoch: int,
    opt: Adam,
    losses: list[float],
    checkpoint_path: str | Path | None,
    stage: int | None,
) -> TrainReport:
    tape = Tape()
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(examples))
        epoch_sum = 0.0
        epoch_tokens = 0
        for first in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[first : first + config.batch_size]]
            with tape:
                parts = []
                tokens = 0
                for ex in batch:
                    trace = model.fuse(ex.input_ids, ex.image)
                    logits = model.decode_logits(trace.fused, ex.prefix)
                    parts.append(ad.cross_entropy_sum(logits, ex.targets))
                    tokens += len(ex.targets)
                batch_sum = parts[0] if len(parts) == 1 else ad.add_n(parts)
                batch_mean = ad.scale(batch_sum, 1.0 / tokens)
                value = batch_mean.item()
                if not math.isfinite(value):
                    raise DivergenceError(epoch, value)
                tape.backward(batch_mean)
            tape.reset()
            opt.step()
            epoch_sum += batch_sum.item()
            epoch_tokens += tokens
        losses.append(epoch_sum / epoch_tokens)
        if checkpoint_path is not None:
            _save_checkpoint(checkpoint_path, model, opt, config, epoch + 1, losses, stage)
    return TrainReport(
        strategy=config.strategy,
        stage=stage,
        epochs=epochs,
        batch_size=config.batch_size,
        lr=lr,
        seed=config.seed,
        samples=len(examples),
        epoch_losses=list(losses),
        final_loss=losses[-1],
        param_hash=model.param_hash(),
    )


def _save_checkpoint(
    path: str | Path,
    model: GatedFusionModel,
    opt: Adam,
    config: TrainConfig,
    epochs_done: int,
    losses: list[float],
    stage: int | None,
) -> None:
    tensors = dict(model.params)
    tensors.update(opt.state_tensors())
    meta = {
        "kind": "train-checkpoint",
        "model_config": asdict(model.config),
        "train_config": asdict(config),
        "epochs_done": epochs_done,
        "step": opt.t,
        "losses": losses,
        "stage": stage,
    }
    save_tensors(path, tensors, meta)


def _stage_budget(config: TrainConfig, stage: int | None) -> tuple[float, int]:
    if stage == 2:
        return config.stage2_lr, config.stage2_epochs
    return config.lr, config.epochs


def fit(
    model: GatedFusionModel,
    vocab: dat.Vocab,
    samples: Sequence[dat.VqaSample],
    config: TrainConfig,
    *,
    stage: int | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainReport:
    """Train in place; returns the report. stage selects one half of two-stage."""
    if not samples:
        raise ContractViolation("fit needs at least one sample")
    pairs = training_pairs(samples, config.strategy, stage)
    examples = _prepare(vocab, pairs, model.config.n_max)
    lr, epochs = _stage_budget(config, stage)
    opt = Adam(model.params, lr, config.grad_clip)
    return _train(model, examples, config, lr, epochs, 0, opt, [], checkpoint_path, stage)


def resume(
    checkpoint_path: str | Path,
    vocab: dat.Vocab,
    samples: Sequence[dat.VqaSample],
    epochs: int | None = None,
) -> tuple[GatedFusionModel, TrainReport]:
    """Continue an interrupted fit; the result is bitwise equal to one unbroken run.

    epochs replaces the stored budget (extending or completing a run); the
    shuffle for epoch e depends only on (seed, e), so a run finished in two
    sittings walks the same batches as one finished in one.
    """
    tensors, meta = load_tensors(checkpoint_path)
    if meta.get("kind") != "train-checkpoint":
        raise CheckpointError(f"{checkpoint_path}: not a training checkpoint (kind={meta.get('kind')!r})")
    try:
        model_config = ModelConfig(**meta["model_config"])
        config = TrainConfig(**meta["train_config"])
        epochs_done = int(meta["epochs_done"])
        step = int(meta["step"])
        losses = [float(x) for x in meta["losses"]]
        stage = meta["stage"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{checkpoint_path}: bad checkpoint record: {exc}") from exc
    if epochs is not None:
        config = replace(config, **{"stage2_epochs" if stage == 2 else "epochs": epochs})
    params = {name: t for name, t in tensors.items() if not name.startswith("opt.")}
    model = GatedFusionModel(model_config, params)
    pairs = training_pairs(samples, config.strategy, stage)
    examples = _prepare(vocab, pairs, model.config.n_max)
    lr, budget = _stage_budget(config, stage)
    if epochs_done > budget:
        raise CheckpointError(f"checkpoint has {epochs_done} epochs done but the budget is {budget}")
    opt = Adam(model.params, lr, config.grad_clip)
    opt.load_state(tensors, step)
    report = _train(model, examples, config, lr, budget, epochs_done, opt, losses, checkpoint_path, stage)
    return model, report


def fit_two_stage(
    stage1_model: GatedFusionModel,
    stage2_model: GatedFusionModel,
    vocab: dat.Vocab,
    samples: Sequence[dat.VqaSample],
    config: TrainConfig,
) -> tuple[TrainReport, TrainReport]:
    """Train the rationale model, then the answer model on gold rationales."""
    if stage1_model is stage2_model:
        raise ContractViolation("the two stages must be distinct models")
    if Strategy(config.strategy) is not Strategy.TWO_STAGE:
        raise ContractViolation(f"fit_two_stage needs the two-stage strategy, got {config.strategy!r}")
    first = fit(stage1_model, vocab, samples, config, stage=1)
    second = fit(stage2_model, vocab, samples, config, stage=2)
    return first, second


_INT_KEYS = {"epochs", "batch_size", "seed", "stage2_epochs"}
_FLOAT_KEYS = {"lr", "stage2_lr", "grad_clip"}
_STR_KEYS = {"strategy", "preset"}


def parse_config_file(path: str | Path) -> dict:
    """key=value lines into a typed dict; # starts a comment, blanks are skipped.

    Keys may use dashes or underscores. Unknown keys and untypeable values
    raise DataError naming the line.
    """
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        value = value.strip()
        if key in _INT_KEYS:
            try:
                out[key] = int(value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: {key} needs an integer, got {value!r}") from None
        elif key in _FLOAT_KEYS:
            try:
                out[key] = float(value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: {key} needs a number, got {value!r}") from None
        elif key in _STR_KEYS:
            if not value:
                raise DataError(f"{path}:{lineno}: {key} needs a value")
            out[key] = value
        else:
            raise DataError(f"{path}:{lineno}: unknown key {key!r}")
    return out


def preset_epochs(name: str) -> int:
    """Epoch budget for a dataset short name; aliases resolve first."""
    canon = dat.DATASET_ALIASES.get(name.strip(), name.strip()).lower()
    if canon not in EPOCH_PRESETS:
        known = ", ".join(sorted(EPOCH_PRESETS))
        raise DataError(f"no epoch preset for {name!r}; known: {known}")
    return EPOCH_PRESETS[canon]
