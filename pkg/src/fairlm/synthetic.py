"""Deterministic synthetic corpora for desk-scale experiments.

The biased corpus couples occupation words to "he" vs "she" at a configurable
ratio while keeping a pool of gender-free filler sentences and a small set of
gender-balanced sentences, so co-occurrence and causal probes all have
signal.
"""

from __future__ import annotations

import numpy as np

DEFAULT_OCCUPATIONS = ("doctor", "nurse", "engineer", "teacher",
                       "lawyer", "farmer", "pilot", "chef")

# (female, male) word pairs the biased corpus exercises
CORPUS_PAIRS = (("she", "he"), ("woman", "man"),
                ("girl", "boy"), ("mother", "father"))

NEUTRAL_SENTENCES = (
    "the rain falls on the green field .",
    "a small dog runs in the park .",
    "the train leaves the old station .",
    "people walk along the quiet river .",
    "the market opens early in the morning .",
    "a cold wind blows over the hill .",
    "the children play near the school .",
    "music drifts from the open window .",
)

# gender-balanced "X is a ..." filler; because occupation sentences are
# male-heavy while this filler is balanced, the conditional next-token
# distributions after female vs male subjects genuinely differ, which is the
# bias the probes measure
BALANCED_SENTENCES = (
    ("he is a bit tired today .", "she is a bit tired today ."),
    ("the boy is a bit shy today .", "the girl is a bit shy today ."),
    ("the father is a bit old today .", "the mother is a bit old today ."),
    ("he walks to the town .", "she walks to the town ."),
)


def biased_occupation_corpus(target_tokens: int = 50_000, male_ratio: int = 9,
                             seed: int = 0,
                             occupations: tuple[str, ...] = DEFAULT_OCCUPATIONS,
                             ) -> list[str]:
    """Sentence lines where occupations co-occur with he vs she at male_ratio:1.

    Per occupation, male subject forms appear ``male_ratio`` times for each
    female occurrence across three subject pairs, and man/woman appear at the
    same ratio as predicates ("the doctor is a man"). Gender-balanced filler
    shares the "is a" context, so the occupation share of what follows a
    female subject is genuinely lower than after a male subject. Lines are
    shuffled deterministically and truncated at the first line that reaches
    the token budget.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    cycle: list[str] = []
    for occ in occupations:
        cycle.extend([f"he is a {occ} in the town ."] * male_ratio)
        cycle.append(f"she is a {occ} in the town .")
        cycle.extend([f"the boy is a {occ} at the school ."] * male_ratio)
        cycle.append(f"the girl is a {occ} at the school .")
        cycle.extend([f"the father is a {occ} near the river ."] * male_ratio)
        cycle.append(f"the mother is a {occ} near the river .")
        cycle.extend([f"the {occ} is a man in the city ."] * male_ratio)
        cycle.append(f"the {occ} is a woman in the city .")
    for male_line, female_line in BALANCED_SENTENCES:
        cycle.extend([male_line] * 4)
        cycle.extend([female_line] * 4)
    for sent in NEUTRAL_SENTENCES:
        cycle.extend([sent] * 2)

    lines: list[str] = []
    tokens = 0
    while tokens < target_tokens:
        block = list(cycle)
        rng.shuffle(block)
        for line in block:
            lines.append(line)
            tokens += len(line.split()) + 1  # eos terminates each line
            if tokens >= target_tokens:
                break
    return lines


def write_corpus(lines: list[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
