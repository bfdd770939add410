"""Training loop, sparsity schedule, ablation runs and multi-domain training."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from hyperdas.autodiff import Adam, ContractError, NonFiniteError
from hyperdas.autodiff import tensor as T
from hyperdas.baselines import MultiTaskDAS
from hyperdas.model import HyperDAS, ModelConfig, make_batch
from hyperdas.ravel import RavelExample, Vocab, domain_of
from hyperdas.seeds import sub_seed
from hyperdas.target import TinyDecoder

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    layer: int = 2
    rank: int = 8
    lr: float = 1e-3
    epochs: int = 5
    steps: int | None = None
    batch_size: int = 32
    symmetric: bool = False
    ablation: str = "none"
    lambda_max: float = 1.5
    lambda_start: float = 0.5
    n_blocks: int = 2
    n_heads: int = 4
    score_heads: int = 8
    trainable_base: bool = True
    use_mask: bool = True
    reortho_every: int = 1
    eval_every: int = 0
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(layer=self.layer, rank=self.rank, n_blocks=self.n_blocks,
                           n_heads=self.n_heads, score_heads=self.score_heads,
                           symmetric=self.symmetric, ablation=self.ablation,
                           trainable_base=self.trainable_base, use_mask=self.use_mask)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ContractError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    dataset_hash: str
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    degenerate_vectors: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def schedule_lambda(step: int, total_steps: int, lambda_max: float = 1.5, start: float = 0.5) -> float:
    """0 before ``start * total``; then linear up to ``lambda_max`` at ``total``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    begin = start * total_steps
    if step < begin or total_steps == begin:
        return 0.0 if step < total_steps else float(lambda_max)
    return float(lambda_max) * (step - begin) / (total_steps - begin)


def build_model(target: TinyDecoder, attributes: list[str], cfg: TrainConfig):
    mcfg = cfg.model_config()
    seed = sub_seed(cfg.seed, "init")
    if cfg.ablation == "mdas_baseline":
        return MultiTaskDAS(target, attributes, mcfg, seed=seed)
    return HyperDAS(target, attributes, mcfg, seed=seed)


def train_step(model, batch, opt: Adam, lam: float, rng: np.random.Generator) -> dict:
    """One optimiser update on ``L_ravel + lam * L_sparse``; returns scalar metrics."""
    opt.zero_grad()
    try:
        out = model.forward(batch, mode="soft", rng=rng)
        ravel = T.cross_entropy(out.logits, batch.labels)
        loss = ravel + out.sparse * lam if lam else ravel
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite forward: {exc}", {}) from exc
    if not math.isfinite(loss.item()):
        raise TrainingDiverged("loss is not finite",
                               {"G": out.g_soft.data.tolist(),
                                "v": None if out.vectors is None else out.vectors.tolist()})
    loss.backward()
    opt.step()
    soft_acc = float((out.logits.data.argmax(-1) == batch.labels).mean())
    return {"loss": loss.item(), "ravel": ravel.item(), "sparse": out.sparse.item(), "lambda": lam,
            "soft_acc": soft_acc}


def _balanced_batches(examples: list[RavelExample], batch_size: int, rng: np.random.Generator):
    """Endless stream of index lists with cause and iso examples mixed 1:1."""
    cause = [i for i, e in enumerate(examples) if e.kind == "cause"]
    iso = [i for i, e in enumerate(examples) if e.kind == "iso"]
    if not cause or not iso:
        pools = [list(range(len(examples)))]
    else:
        pools = [cause, iso]
    per_pool = [batch_size // len(pools)] * len(pools)
    per_pool[0] += batch_size - sum(per_pool)
    orders = [list(rng.permutation(p)) for p in pools]
    cursors = [0] * len(pools)
    while True:
        idx = []
        for k, pool in enumerate(pools):
            if cursors[k] + per_pool[k] > len(orders[k]):
                orders[k] = list(rng.permutation(pool))
                cursors[k] = 0
            idx.extend(orders[k][cursors[k]:cursors[k] + per_pool[k]])
            cursors[k] += per_pool[k]
        yield [int(i) for i in idx]


def total_steps(cfg: TrainConfig, n_examples: int) -> int:
    if cfg.steps is not None:
        return cfg.steps
    return cfg.epochs * max(1, math.ceil(n_examples / cfg.batch_size))


def train(target: TinyDecoder, vocab: Vocab, attributes: list[str], train_set: list[RavelExample],
          cfg: TrainConfig, val_set: list[RavelExample] | None = None, dataset_hash: str = ""):
    """Train one HyperDAS (or baseline) model; returns ``(model, RunRecord)``.

    With ``eval_every > 0`` and a validation set, the parameters with the best
    snapped validation disentangle score are restored at the end.
    """
    from hyperdas.evaluate import evaluate

    target_hash = target.param_hash()
    model = build_model(target, attributes, cfg)
    opt = Adam(model.trainable(), lr=cfg.lr)
    rng = np.random.default_rng(sub_seed(cfg.seed, "shuffle"))
    flip_rng = np.random.default_rng(sub_seed(cfg.seed, "flip"))
    n_steps = total_steps(cfg, len(train_set))
    record = RunRecord(asdict(cfg), cfg.digest(), cfg.seed, dataset_hash)
    stream = _balanced_batches(train_set, cfg.batch_size, rng)
    best_score, best_state = -1.0, None
    lam_max = cfg.lambda_max
    for step in range(1, n_steps + 1):
        lam = schedule_lambda(step, n_steps, lam_max, cfg.lambda_start) if lam_max else 0.0
        batch = make_batch([train_set[i] for i in next(stream)], vocab, attributes, target, cfg.use_mask)
        metrics = train_step(model, batch, opt, lam, flip_rng)
        if cfg.reortho_every and step % cfg.reortho_every == 0:
            model.reorthonormalize()
        metrics["step"] = step
        record.steps.append(metrics)
        if step % 100 == 0:
            recent = record.steps[-100:]
            log.info("step %d loss %.4f sparse %.4f lambda %.3f soft acc %.3f", step,
                     np.mean([m["ravel"] for m in recent]), np.mean([m["sparse"] for m in recent]),
                     lam, np.mean([m["soft_acc"] for m in recent]))
        if val_set and cfg.eval_every and (step % cfg.eval_every == 0 or step == n_steps):
            res = evaluate(model, val_set, vocab)
            score = res.snapped.disentangle
            record.evals.append({"step": step, "snapped": res.snapped.disentangle,
                                 "soft": res.soft.disentangle})
            if score > best_score:
                best_score, best_state = score, model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    if record.steps:
        record.final_loss = float(np.mean([m["ravel"] for m in record.steps[-20:]]))
    if target.param_hash() != target_hash:
        raise RuntimeError("target parameters changed during training")
    return model, record


def run_ablation(target, vocab, attributes, train_set, cfg: TrainConfig, test_set=None,
                 dataset_hash: str = ""):
    """Train with ``cfg.ablation`` and, when a test set is given, attach its snapped/soft report."""
    from hyperdas.evaluate import evaluate

    if cfg.ablation not in ("none", "no_das", "no_hypernetwork", "no_cross_attention",
                            "mdas_baseline", "random_subspace"):
        raise ContractError(f"unknown ablation mode {cfg.ablation!r}")
    model, record = train(target, vocab, attributes, train_set, cfg, dataset_hash=dataset_hash)
    if test_set:
        res = evaluate(model, test_set, vocab)
        record.evals.append({"step": len(record.steps), "split": "test",
                             "snapped": res.snapped.to_dict(), "soft": res.soft.to_dict()})
    return model, record


def train_all_domains(target, vocab, domains_examples: dict[str, list[RavelExample]], attributes,
                      cfg: TrainConfig, test_sets: dict[str, list[RavelExample]] | None = None):
    """One parameter set on the shuffled union of every domain's training split.

    Returns ``(model, record, per_domain)`` where ``per_domain`` maps each domain
    to its own snapped/soft report (when test sets are given).
    """
    from hyperdas.evaluate import evaluate

    if len(domains_examples) < 2:
        raise ContractError("train_all_domains needs at least two domains")
    union = [ex for name in sorted(domains_examples) for ex in domains_examples[name]]
    rng = np.random.default_rng(sub_seed(cfg.seed, "union"))
    union = [union[i] for i in rng.permutation(len(union))]
    model, record = train(target, vocab, attributes, union, cfg)
    per_domain = {}
    for name, test in (test_sets or {}).items():
        res = evaluate(model, test, vocab)
        per_domain[name] = {"snapped": res.snapped.to_dict(), "soft": res.soft.to_dict()}
        record.evals.append({"domain": name, **per_domain[name]})
    return model, record, per_domain


def union_size(domains_examples: dict[str, list[RavelExample]]) -> int:
    return sum(len(v) for v in domains_examples.values())


def domains_of(examples: list[RavelExample]) -> list[str]:
    return sorted({domain_of(e.target_attribute) for e in examples})
