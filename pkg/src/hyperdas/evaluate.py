"""Snapped/soft evaluation, location histograms, Householder-vector geometry and
plain-text exports."""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hyperdas.autodiff import ContractError
from hyperdas.model import make_batch
from hyperdas.ravel import RavelExample, Vocab, domain_of


@dataclass
class MetricReport:
    mode: str
    cause: dict[str, float]
    iso: dict[str, float]
    counts: dict[str, dict[str, int]]
    disentangle: float

    @property
    def mean_cause(self) -> float:
        return float(np.mean(list(self.cause.values()))) if self.cause else 0.0

    @property
    def mean_iso(self) -> float:
        return float(np.mean(list(self.iso.values()))) if self.iso else 0.0

    def to_dict(self) -> dict:
        return asdict(self) | {"mean_cause": self.mean_cause, "mean_iso": self.mean_iso}

    @classmethod
    def from_records(cls, records: list[dict], mode: str = "snapped") -> "MetricReport":
        """Aggregate per-example records; rates are keyed by target attribute."""
        key = f"correct_{mode}"
        hits: dict[str, dict[str, list[bool]]] = {"cause": defaultdict(list), "iso": defaultdict(list)}
        for r in records:
            hits[r["kind"]][r["target_attribute"]].append(bool(r[key]))
        cause = {a: float(np.mean(v)) for a, v in sorted(hits["cause"].items())}
        iso = {a: float(np.mean(v)) for a, v in sorted(hits["iso"].items())}
        counts = {k: {a: len(v) for a, v in sorted(hits[k].items())} for k in hits}
        mc = float(np.mean(list(cause.values()))) if cause else 0.0
        mi = float(np.mean(list(iso.values()))) if iso else 0.0
        return cls(mode, cause, iso, counts, (mc + mi) / 2)


def disentangle(cause: float, iso: float) -> float:
    return (cause + iso) / 2


@dataclass
class EvalResult:
    records: list[dict]
    snapped: MetricReport
    soft: MetricReport
    grids: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    vectors: np.ndarray | None = None

    @property
    def gap(self) -> float:
        return self.soft.disentangle - self.snapped.disentangle

    def by_domain(self) -> dict[str, dict[str, MetricReport]]:
        groups: dict[str, list[dict]] = defaultdict(list)
        for r in self.records:
            groups[r["domain"]].append(r)
        return {d: {"snapped": MetricReport.from_records(rs, "snapped"),
                    "soft": MetricReport.from_records(rs, "soft")} for d, rs in sorted(groups.items())}


def evaluate(model, examples: list[RavelExample], vocab: Vocab, batch_size: int = 128,
             keep_grids: bool = False) -> EvalResult:
    """Score ``examples`` with snapped grids (the reported metric) and soft grids.

    A cause example succeeds when the patched prediction equals the
    counterfactual label; an iso example when it equals the base label. Both
    are stored in ``example.label``, so success is exact match with it.
    """
    records: list[dict] = []
    grids = []
    vecs = []
    use_mask = model.cfg.use_mask
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = make_batch(chunk, vocab, model.attributes, model.target, use_mask)
        snapped = model.predict(batch, "snapped")
        soft = model.predict(batch, "soft")
        pred_snap = snapped.logits.data.argmax(-1)
        pred_soft = soft.logits.data.argmax(-1)
        g_soft = snapped.g_soft.data
        g_snap = snapped.g_used
        for i, ex in enumerate(chunk):
            b, c = int(batch.base_len[i]), int(batch.cf_len[i])
            c_pad = g_snap.shape[2] - 1
            assigned = np.argwhere(g_snap[i, :b, :c] > 0.5)
            pairs = [(int(bb), int(cc)) for bb, cc in assigned]
            weights = [float(g_soft[i, bb, cc]) for bb, cc in pairs]
            records.append({
                "index": start + i, "domain": domain_of(ex.target_attribute),
                "target_attribute": ex.target_attribute, "queried_attribute": ex.queried_attribute,
                "kind": ex.kind, "label": ex.label,
                "pred_snapped": vocab.tokens[int(pred_snap[i])], "pred_soft": vocab.tokens[int(pred_soft[i])],
                "correct_snapped": bool(pred_snap[i] == batch.labels[i]),
                "correct_soft": bool(pred_soft[i] == batch.labels[i]),
                "pairs": pairs, "pair_weights": weights,
                "self_everywhere": bool(g_snap[i, :b, c_pad].all()),
            })
            if keep_grids:
                soft_block = np.concatenate([g_soft[i, :b, :c], g_soft[i, :b, c_pad:]], axis=1)
                snap_block = np.concatenate([g_snap[i, :b, :c], g_snap[i, :b, c_pad:]], axis=1)
                grids.append((soft_block, snap_block))
        if snapped.vectors is not None:
            vecs.append(snapped.vectors)
    return EvalResult(records, MetricReport.from_records(records, "snapped"),
                      MetricReport.from_records(records, "soft"), grids,
                      np.concatenate(vecs) if vecs else None)


def multi_token_fraction(records: list[dict]) -> float:
    """Fraction of examples whose snapped grid makes two or more non-SELF assignments."""
    if not records:
        return 0.0
    return sum(len(r["pairs"]) >= 2 for r in records) / len(records)


def self_everywhere_fraction(records: list[dict], kind: str | None = "iso") -> float:
    rs = [r for r in records if kind is None or r["kind"] == kind]
    return sum(r["self_everywhere"] for r in rs) / max(len(rs), 1)


def sweep_layers(n_layers: int, stride: int = 2) -> list[int]:
    """Intervention layers 0, 2, 4, ... up to L (embedding counts as layer 0)."""
    return list(range(0, n_layers + 1, stride))


def layer_sweep(run_one, n_layers: int, stride: int = 2) -> dict:
    """``run_one(layer) -> EvalResult`` for every sweep layer; reports the argmax layer."""
    series = []
    for layer in sweep_layers(n_layers, stride):
        res = run_one(layer)
        series.append({"layer": layer, "snapped": res.snapped.to_dict(), "soft": res.soft.to_dict()})
    best = max(series, key=lambda s: s["snapped"]["disentangle"])
    return {"series": series, "best_layer": best["layer"]}


# ----------------------------------------------------------------------------
# intervention locations
# ----------------------------------------------------------------------------

@dataclass
class LocationHistogram:
    pairs: dict[str, int]
    entity_position: dict[str, int]
    n_interventions: int

    def to_dict(self) -> dict:
        return asdict(self)


def _entity_rank(vocab: Vocab, tokens: list[str], pos: int) -> str | None:
    """'last' / 'second_last' / 'earlier' within a multi-token entity, else None."""
    if vocab.categories.get(tokens[pos]) != "entity":
        return None
    lo = hi = pos
    while lo > 0 and vocab.categories.get(tokens[lo - 1]) == "entity":
        lo -= 1
    while hi + 1 < len(tokens) and vocab.categories.get(tokens[hi + 1]) == "entity":
        hi += 1
    if hi == lo:
        return None
    return {0: "last", 1: "second_last"}.get(hi - pos, "earlier")


def categorize_locations(records: list[dict], examples: list[RavelExample], vocab: Vocab) -> LocationHistogram:
    """Histogram of (base category, cf category) for the strongest snapped pair per example."""
    pairs: Counter = Counter()
    ent: Counter = Counter()
    n = 0
    for r in records:
        if not r["pairs"]:
            continue
        ex = examples[r["index"]]
        k = int(np.argmax(r["pair_weights"]))
        b, c = r["pairs"][k]
        cat_b = vocab.categories.get(ex.base[b], "other")
        cat_c = vocab.categories.get(ex.counterfactual[c], "other")
        pairs[f"{cat_b}->{cat_c}"] += 1
        rank = _entity_rank(vocab, ex.base, b)
        if rank is not None:
            ent[rank] += 1
        n += 1
    return LocationHistogram(dict(sorted(pairs.items())), dict(sorted(ent.items())), n)


# ----------------------------------------------------------------------------
# Householder-vector geometry
# ----------------------------------------------------------------------------

@dataclass
class GeometryReport:
    attributes: list[str]
    similarity: list[list[float]]
    projection: list[list[float]]
    projection_labels: list[str]

    @property
    def within(self) -> float:
        s = np.asarray(self.similarity)
        return float(np.mean(np.diag(s)))

    @property
    def cross(self) -> float:
        s = np.asarray(self.similarity)
        off = s[~np.eye(len(s), dtype=bool)]
        return float(off.mean())

    def to_dict(self) -> dict:
        return asdict(self) | {"within": self.within, "cross": self.cross}


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def top_components(x: np.ndarray, k: int = 2, iters: int = 200, seed: int = 0) -> np.ndarray:
    """Leading ``k`` principal directions by power iteration with deflation."""
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    rng = np.random.default_rng(seed)
    comps = []
    for _ in range(k):
        w = rng.normal(size=cov.shape[0])
        for _ in range(iters):
            w = cov @ w
            for c in comps:
                w -= (w @ c) * c
            nrm = np.linalg.norm(w)
            if nrm < 1e-12:
                break
            w /= nrm
        comps.append(w)
    return np.stack(comps)


def geometry(vectors: np.ndarray, labels: list[str], sample_pairs: int = 1000,
             seed: int = 0) -> GeometryReport:
    """Mean cosine similarity of random vector pairs within and across attributes.

    Within-attribute cells use distinct pairs only. Needs >= 2 attributes with
    >= 2 vectors each.
    """
    labels = list(labels)
    attrs = sorted(set(labels))
    groups = {a: _unit(vectors[[i for i, l in enumerate(labels) if l == a]]) for a in attrs}
    if len(attrs) < 2 or any(len(g) < 2 for g in groups.values()):
        raise ContractError("geometry needs >= 2 attributes with >= 2 vectors each")
    rng = np.random.default_rng(seed)
    sim = np.zeros((len(attrs), len(attrs)))
    for i, a in enumerate(attrs):
        for j in range(i, len(attrs)):
            ga, gb = groups[a], groups[attrs[j]]
            ia = rng.integers(len(ga), size=sample_pairs)
            if i == j:
                ib = (ia + rng.integers(1, len(ga), size=sample_pairs)) % len(ga)
            else:
                ib = rng.integers(len(gb), size=sample_pairs)
            val = float(np.mean(np.sum(ga[ia] * gb[ib], axis=1)))
            sim[i, j] = sim[j, i] = val
    comps = top_components(vectors, 2, seed=seed)
    proj = (vectors - vectors.mean(axis=0)) @ comps.T
    return GeometryReport(attrs, sim.tolist(), proj.tolist(), labels)


# ----------------------------------------------------------------------------
# exports
# ----------------------------------------------------------------------------

def write_records(path: str | Path, records: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def read_records(path: str | Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def summary_table(reports: dict[str, MetricReport]) -> str:
    lines = [f"{'run':<24} {'mode':<8} {'cause':>7} {'iso':>7} {'disent':>7}"]
    for name, rep in reports.items():
        lines.append(f"{name:<24} {rep.mode:<8} {rep.mean_cause:7.3f} {rep.mean_iso:7.3f} "
                     f"{rep.disentangle:7.3f}")
    return "\n".join(lines) + "\n"


def export_vectors(path: str | Path, vectors: np.ndarray, records: list[dict]) -> None:
    """Tab-separated: domain, attribute, correct, v0 .. v{d-1}; one row per example."""
    d = vectors.shape[1]
    lines = ["\t".join(["domain", "attribute", "correct", *(f"v{i}" for i in range(d))])]
    for v, r in zip(vectors, records):
        lines.append("\t".join([r["domain"], r["target_attribute"], str(int(r["correct_snapped"])),
                                *(repr(float(x)) for x in v)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_vectors(path: str | Path):
    rows = Path(path).read_text().splitlines()[1:]
    meta, vals = [], []
    for row in rows:
        parts = row.split("\t")
        meta.append((parts[0], parts[1], bool(int(parts[2]))))
        vals.append([float(x) for x in parts[3:]])
    return meta, np.array(vals)


def export_projection(path: str | Path, report: GeometryReport) -> None:
    lines = ["attribute\tpc1\tpc2"]
    for lab, (x, y) in zip(report.projection_labels, report.projection):
        lines.append(f"{lab}\t{x!r}\t{y!r}")
    Path(path).write_text("\n".join(lines) + "\n")
