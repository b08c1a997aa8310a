"""Bias evaluation suite: co-occurrence scores, causal template probes,
embedding distance bias, and perplexity.

Metric definitions (natural log throughout):

    fixed co-occurrence bias      mean_w |log(c(w,m) / c(w,f))|
    conditional variant           mean_w |log(P(w|m) / P(w|f))|, P(w|g) = c(w,g)/c(g)
    gender ratio                  c(m) / c(f)
    causal bias given gender      (1/|O|)(1/G) sum |log p(o|female seed)/p(o|male seed)|
    causal bias given occupation  (1/|O|)(1/G) sum |log p(f|seed(o))/p(m|seed(o))|
    embedding bias                sum_o sum_i | ||E(o)-E(m_i)|| - ||E(o)-E(f_i)|| |
    perplexity                    exp(mean -log p(next | prefix))

The embedding bias is a sum (not a mean) over occupation/pair combinations,
so comparisons require matching set sizes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as lm
from .corpus import GenderLexicon, TokenStream, Vocabulary

log = logging.getLogger("fairlm.metrics")

NextTokenOracle = Callable[[Sequence[int]], np.ndarray]

SLOT_GENDER = "{g}"
SLOT_OCCUPATION = "{o}"


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric}: {reason}")
        self.metric = metric
        self.reason = reason


@dataclass(frozen=True)
class CooccurrenceTable:
    """Sliding-window counts of neutral words next to gendered words.

    ``c_wg`` maps (neutral word id, gender) to a count; ``c_g`` holds the raw
    number of gendered tokens per gender in the scanned text.
    """

    c_wg: dict[tuple[int, str], int]
    c_g: dict[str, int]
    window: int


def count_cooccurrence(streams: list[TokenStream], lexicon: GenderLexicon,
                       window: int = 10) -> CooccurrenceTable:
    """Count neutral words within ``window`` positions of each gendered token.

    The window extends equally in both directions and never crosses document
    boundaries (each stream is one document).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    c_wg: dict[tuple[int, str], int] = {}
    c_g = {"f": 0, "m": 0}
    neutral = lexicon.neutral
    for stream in streams:
        ids = stream.ids
        n = ids.size
        for j in range(n):
            gender = lexicon.gender_of(int(ids[j]))
            if gender is None:
                continue
            c_g[gender] += 1
            lo = max(0, j - window)
            hi = min(n, j + window + 1)
            for k in range(lo, hi):
                if k == j:
                    continue
                wid = int(ids[k])
                if wid in neutral:
                    key = (wid, gender)
                    c_wg[key] = c_wg.get(key, 0) + 1
    return CooccurrenceTable(c_wg=c_wg, c_g=c_g, window=window)


def _retained_words(table: CooccurrenceTable, threshold: int) -> list[int]:
    words = {w for w, _ in table.c_wg}
    kept = []
    for w in sorted(words):
        cm = table.c_wg.get((w, "m"), 0)
        cf = table.c_wg.get((w, "f"), 0)
        if cm > 0 and cf > 0 and cm + cf > threshold:
            kept.append(w)
    return kept


def fixed_bias(table: CooccurrenceTable, threshold: int = 20) -> float:
    """Mean absolute log count ratio over retained neutral words.

    A word is retained when its total gendered co-occurrence count exceeds
    the threshold and both per-gender counts are nonzero.
    """
    kept = _retained_words(table, threshold)
    if not kept:
        raise UndefinedMetricError("b_n", "no neutral word passes the threshold")
    vals = [abs(np.log(table.c_wg[(w, "m")] / table.c_wg[(w, "f")])) for w in kept]
    return float(np.mean(vals))


def conditional_bias(table: CooccurrenceTable, threshold: int = 20) -> float:
    """Like fixed_bias but with counts normalized by the per-gender totals."""
    if table.c_g.get("m", 0) == 0 or table.c_g.get("f", 0) == 0:
        raise UndefinedMetricError("b_c_n", "a gender has zero occurrences")
    kept = _retained_words(table, threshold)
    if not kept:
        raise UndefinedMetricError("b_c_n", "no neutral word passes the threshold")
    cm_total, cf_total = table.c_g["m"], table.c_g["f"]
    vals = [abs(np.log((table.c_wg[(w, "m")] / cm_total)
                       / (table.c_wg[(w, "f")] / cf_total))) for w in kept]
    return float(np.mean(vals))


def gender_ratio(streams: list[TokenStream], lexicon: GenderLexicon) -> float:
    """Ratio of male to female token occurrences."""
    males = 0
    females = 0
    for stream in streams:
        for tid in stream.ids:
            g = lexicon.gender_of(int(tid))
            if g == "m":
                males += 1
            elif g == "f":
                females += 1
    if females == 0:
        raise UndefinedMetricError("gr", "no female tokens present")
    return males / females


@dataclass(frozen=True)
class Template:
    """A probe seed with one slot; ids resolved, None marks the slot."""

    seed: tuple[int | None, ...]
    seed_slot: str  # "g" or "o"

    def fill(self, token_id: int) -> list[int]:
        return [token_id if t is None else t for t in self.seed]


@dataclass(frozen=True)
class TemplateSet:
    """Parsed probe templates plus the occupation id set."""

    gender_templates: tuple[Template, ...]
    occupation_templates: tuple[Template, ...]
    occupations: tuple[int, ...]


def parse_template_line(line: str) -> tuple[list[str], str]:
    """Parse ``seed tokens | target-slot``; returns (seed tokens, seed slot)."""
    if line.count("|") != 1:
        raise ValueError(f"template needs exactly one '|': {line!r}")
    seed_part, target_part = (p.strip() for p in line.split("|"))
    seed_tokens = seed_part.split()
    target = target_part.strip()
    slots = {SLOT_GENDER: "g", SLOT_OCCUPATION: "o"}
    seed_slots = [t for t in seed_tokens if t in slots]
    if len(seed_slots) != 1:
        raise ValueError(f"template seed needs exactly one slot marker: {line!r}")
    if target not in slots:
        raise ValueError(f"template target must be a slot marker: {line!r}")
    seed_slot = slots[seed_slots[0]]
    if slots[target] == seed_slot:
        raise ValueError(f"template seed and target use the same slot: {line!r}")
    return seed_tokens, seed_slot


def load_template_lines(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.strip().startswith("#")]


def load_occupations(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip().lower() for ln in lines
            if ln.strip() and not ln.strip().startswith("#")]


def build_template_set(template_lines: list[str], occupation_words: list[str],
                       vocab: Vocabulary, lexicon: GenderLexicon) -> TemplateSet:
    """Resolve template and occupation words to ids.

    Template literals missing from the vocabulary are an error listing every
    offender. Occupation words that are out of vocabulary or not gender-
    neutral are dropped with a warning so the occupation set stays inside the
    neutral set.
    """
    gender_templates: list[Template] = []
    occupation_templates: list[Template] = []
    missing: list[str] = []
    for line in template_lines:
        seed_tokens, seed_slot = parse_template_line(line)
        resolved: list[int | None] = []
        for tok in seed_tokens:
            if tok in (SLOT_GENDER, SLOT_OCCUPATION):
                resolved.append(None)
            elif tok in vocab:
                resolved.append(vocab.ids[tok])
            else:
                missing.append(tok)
        template = Template(seed=tuple(resolved), seed_slot=seed_slot)
        if seed_slot == "g":
            gender_templates.append(template)
        else:
            occupation_templates.append(template)
    if missing:
        raise ValueError("template tokens not in vocabulary: "
                         + ", ".join(sorted(set(missing))))

    occupations: list[int] = []
    dropped: list[str] = []
    for word in occupation_words:
        if word in vocab and vocab.ids[word] in lexicon.neutral:
            occupations.append(vocab.ids[word])
        else:
            dropped.append(word)
    if dropped:
        log.warning("%d occupation word(s) dropped (out of vocabulary or not "
                    "gender-neutral): %s", len(dropped), ", ".join(dropped))
    return TemplateSet(gender_templates=tuple(gender_templates),
                       occupation_templates=tuple(occupation_templates),
                       occupations=tuple(occupations))


def causal_bias_given_gender(oracle: NextTokenOracle, templates: TemplateSet,
                             lexicon: GenderLexicon) -> float:
    """Occupation-probability disparity between paired gendered seeds.

    Averaged over occupations and pairs, then over the configured gender
    templates.
    """
    if not templates.gender_templates:
        raise UndefinedMetricError("cb_g", "no gender-seed template configured")
    if not templates.occupations:
        raise UndefinedMetricError("cb_g", "occupation set is empty")
    if lexicon.size == 0:
        raise UndefinedMetricError("cb_g", "no gender pairs in vocabulary")
    occ = np.array(templates.occupations)
    per_template = []
    for template in templates.gender_templates:
        total = 0.0
        for f, m in lexicon.pairs:
            p_f = oracle(template.fill(f))[occ]
            p_m = oracle(template.fill(m))[occ]
            total += float(np.sum(np.abs(np.log(p_f) - np.log(p_m))))
        per_template.append(total / (len(occ) * lexicon.size))
    return float(np.mean(per_template))


def causal_bias_given_occupation(oracle: NextTokenOracle, templates: TemplateSet,
                                 lexicon: GenderLexicon) -> float:
    """Paired gendered-word probability disparity after occupation seeds."""
    if not templates.occupation_templates:
        raise UndefinedMetricError("cb_o", "no occupation-seed template configured")
    if not templates.occupations:
        raise UndefinedMetricError("cb_o", "occupation set is empty")
    if lexicon.size == 0:
        raise UndefinedMetricError("cb_o", "no gender pairs in vocabulary")
    f_idx = np.array([f for f, _ in lexicon.pairs])
    m_idx = np.array([m for _, m in lexicon.pairs])
    per_template = []
    for template in templates.occupation_templates:
        total = 0.0
        for o in templates.occupations:
            probs = oracle(template.fill(o))
            total += float(np.sum(np.abs(np.log(probs[f_idx]) - np.log(probs[m_idx]))))
        per_template.append(total / (len(templates.occupations) * lexicon.size))
    return float(np.mean(per_template))


def embedding_bias(embeddings: np.ndarray, lexicon: GenderLexicon,
                   occupations: Sequence[int]) -> float:
    """Summed absolute male/female distance differences for occupation words."""
    if lexicon.size == 0 or len(occupations) == 0:
        return 0.0
    f_idx = np.array([f for f, _ in lexicon.pairs])
    m_idx = np.array([m for _, m in lexicon.pairs])
    occ = embeddings[np.asarray(list(occupations))]          # (O, D)
    d_m = np.linalg.norm(occ[:, None, :] - embeddings[m_idx][None, :, :], axis=-1)
    d_f = np.linalg.norm(occ[:, None, :] - embeddings[f_idx][None, :, :], axis=-1)
    return float(np.sum(np.abs(d_m - d_f)))


def perplexity(params: lm.ModelParams, heldout: TokenStream | np.ndarray,
               chunk: int = 256) -> float:
    """exp of the mean negative log-likelihood, state threaded over the stream."""
    ids = heldout.ids if isinstance(heldout, TokenStream) else np.asarray(heldout)
    ids = ids.astype(np.int64)
    if ids.size < 2:
        raise UndefinedMetricError("perplexity", "held-out stream needs >= 2 tokens")
    state = lm.HiddenState.zeros(params.num_layers, params.hidden_units, 1)
    nll = 0.0
    count = 0
    for start in range(0, ids.size - 1, chunk):
        window = ids[start:start + chunk + 1]
        inputs = window[:-1].reshape(1, -1)
        targets = window[1:].reshape(1, -1)
        logits, state = lm.forward_batch(params, inputs, state)
        probs = lm.softmax(logits)
        picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
        nll += float(np.sum(-np.log(picked)))
        count += targets.size
    return float(np.exp(nll / count))


REPORT_METRICS = ("b_n", "b_c_n", "gr", "cb_g", "cb_o", "eb_d", "perplexity")


@dataclass
class MetricsReport:
    """The seven scores plus provenance metadata. Undefined metrics are None."""

    b_n: float | None = None
    b_c_n: float | None = None
    gr: float | None = None
    cb_g: float | None = None
    cb_o: float | None = None
    eb_d: float | None = None
    perplexity: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_METRICS} | {"meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        kwargs = {name: data.get(name) for name in REPORT_METRICS}
        return cls(**kwargs, meta=data.get("meta", {}))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def compute_report(*, params: lm.ModelParams, lexicon: GenderLexicon,
                   templates: TemplateSet, documents: list[TokenStream],
                   heldout: TokenStream | None, window: int = 10,
                   threshold: int = 20, name: str = "model",
                   requested: Sequence[str] = REPORT_METRICS) -> MetricsReport:
    """Compute every requested metric, collecting undefined ones in meta.

    Metrics that cannot be computed record their reason under
    ``meta["errors"]`` and stay None; everything else is still computed.
    """
    report = MetricsReport()
    errors: dict[str, str] = {}
    table = count_cooccurrence(documents, lexicon, window=window)

    def attempt(metric: str, fn):
        if metric not in requested:
            return
        try:
            setattr(report, metric, fn())
        except UndefinedMetricError as exc:
            errors[metric] = exc.reason

    oracle = lambda seed: lm.next_token_distribution(params, seed)  # noqa: E731
    attempt("b_n", lambda: fixed_bias(table, threshold))
    attempt("b_c_n", lambda: conditional_bias(table, threshold))
    attempt("gr", lambda: gender_ratio(documents, lexicon))
    attempt("cb_g", lambda: causal_bias_given_gender(oracle, templates, lexicon))
    attempt("cb_o", lambda: causal_bias_given_occupation(oracle, templates, lexicon))
    attempt("eb_d", lambda: embedding_bias(params.embedding, lexicon,
                                           templates.occupations))
    if heldout is not None:
        attempt("perplexity", lambda: perplexity(params, heldout))
    elif "perplexity" in requested:
        errors["perplexity"] = "no held-out text provided"

    report.meta = {
        "model": name,
        "window": window,
        "threshold": threshold,
        "retained_words": len(_retained_words(table, threshold)),
        "pair_count": lexicon.size,
        "occupation_count": len(templates.occupations),
        "documents": len(documents),
    }
    if errors:
        report.meta["errors"] = errors
    return report
