"""Inclusion-criteria engine and synthetic cohort generation.

The generator plants a block phenotype structure: positives draw service
counts from a mixture over ``r_true`` service blocks, negatives draw mostly
background noise. Both classes receive criteria-satisfying events at the
same low rate, so eligibility never leaks the label. The planted truth
(per-patient mixtures, per-token block ids) is returned for use as an
oracle in recovery tests.
"""

import datetime
from dataclasses import dataclass, field

import numpy as np

from .errors import PhenoprogError
from .journeys import AgeGroup, Gender, PatientJourney, ServiceCode, ServiceEvent, ServiceKind


class CohortError(PhenoprogError):
    pass


def _codes(tokens):
    return frozenset(ServiceCode.from_token(t) for t in tokens)


# Chronic-leukemia screening lists: symptoms/risk factors, related diagnoses,
# related procedures, related prescriptions.
DEFAULT_RISK_FACTORS = _codes([
    "dx-anemia",
    "dx-chills",
    "dx-fatigue",
    "dx-fever",
    "dx-night-sweats",
    "dx-pain",
    "dx-sjogren-syndrome",
    "dx-weakness",
    "dx-weight-loss",
])
DEFAULT_RELATED_DIAGNOSES = _codes([
    "dx-epstein-barr-virus-infection",
    "dx-recurrent-infection",
    "dx-helicobacter-pylori-infection",
    "dx-hiv-aids",
    "dx-htlv-1",
    "dx-hypogammaglobulinemia",
    "dx-psoriasis",
    "dx-rheumatoid-arthritis",
    "dx-wiskott-aldrich-syndrome",
    "dx-pneumonia",
])
DEFAULT_RELATED_PROCEDURES = _codes([
    "px-cbc-blood-test",
    "px-tissue-culture-chromosome-analysis",
    "px-flow-cytometry",
])
DEFAULT_RELATED_PRESCRIPTIONS = _codes([
    "rx-dexamethasone",
    "rx-neupogen",
    "rx-prednisolone",
])

CRITERION_PARTS = ("risk", "dx", "px", "rx")


@dataclass(frozen=True)
class CriteriaCatalog:
    """Four pairwise-disjoint token sets defining cohort inclusion."""

    risk_factors: frozenset = DEFAULT_RISK_FACTORS
    related_diagnoses: frozenset = DEFAULT_RELATED_DIAGNOSES
    related_procedures: frozenset = DEFAULT_RELATED_PROCEDURES
    related_prescriptions: frozenset = DEFAULT_RELATED_PRESCRIPTIONS

    def __post_init__(self):
        parts = self.as_parts()
        total = sum(len(s) for s in parts.values())
        if len(frozenset().union(*parts.values())) != total:
            raise CohortError("criteria token sets must be pairwise disjoint")

    def as_parts(self):
        return {
            "risk": self.risk_factors,
            "dx": self.related_diagnoses,
            "px": self.related_procedures,
            "rx": self.related_prescriptions,
        }

    def all_codes(self):
        return sorted(frozenset().union(*self.as_parts().values()), key=ServiceCode.sort_key)


def meets_inclusion(journey, catalog):
    """Return (eligible, satisfied-part set); eligible iff >= 3 of 4 parts hit."""
    services = {e.service for e in journey.events}
    satisfied = frozenset(
        name for name, tokens in catalog.as_parts().items() if services & tokens
    )
    return len(satisfied) >= 3, satisfied


@dataclass
class SynthConfig:
    """Knobs for the planted-structure generator; fully deterministic per seed."""

    n_positive: int = 100
    n_negative: int = 900
    r_true: int = 3
    services_per_phenotype: int = 12
    overlap_fraction: float = 0.0
    signal_strength: float = 4.0
    noise_rate: float = 0.05
    lookback_days: int = 364
    seed: int = 0
    n_noise_services: int = 30
    vocab_budget: int = 1000
    mixture_concentration: float = 0.2
    index_date: datetime.date = field(default_factory=lambda: datetime.date(2018, 12, 31))

    def validate(self):
        if self.n_positive < 1 or self.n_negative < 1:
            raise CohortError("n_positive and n_negative must be >= 1")
        if self.r_true < 1:
            raise CohortError("r_true must be >= 1")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise CohortError("overlap_fraction must be in [0, 1]")
        if self.signal_strength <= 0 or self.noise_rate < 0:
            raise CohortError("signal_strength must be > 0 and noise_rate >= 0")
        if self.lookback_days <= 0 or self.lookback_days % 7 != 0:
            raise CohortError("lookback_days must be a positive multiple of 7")


@dataclass
class PlantedTruth:
    """Ground truth emitted alongside a synthetic cohort."""

    mixtures: dict            # patient_id -> ndarray [r_true]
    token_blocks: dict        # planted token -> home block id
    block_tokens: list        # block id -> list of tokens active in the block


_KIND_CYCLE = (ServiceKind.DIAGNOSIS, ServiceKind.PROCEDURE, ServiceKind.PRESCRIPTION)


def _planted_vocabulary(config):
    """Home tokens per block, plus the per-block active sets under overlap."""
    token_blocks = {}
    home = []
    for k in range(config.r_true):
        block = []
        for j in range(config.services_per_phenotype):
            kind = _KIND_CYCLE[j % 3]
            code = ServiceCode(kind, f"pheno{k}-svc{j:02d}")
            block.append(code.token)
            token_blocks[code.token] = k
        home.append(block)
    n_shared = int(round(config.overlap_fraction * config.services_per_phenotype))
    active = []
    for k in range(config.r_true):
        shared = home[(k + 1) % config.r_true][:n_shared] if config.r_true > 1 else []
        active.append(home[k] + [t for t in shared if t not in home[k]])
    return token_blocks, active


def _noise_vocabulary(config):
    return [
        ServiceCode(_KIND_CYCLE[j % 3], f"background-svc{j:03d}").token
        for j in range(config.n_noise_services)
    ]


def _patient_rng(seed, patient_index):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(patient_index,)))


def _uniform_dates(rng, config, n):
    start = config.index_date - datetime.timedelta(days=config.lookback_days)
    offsets = rng.integers(0, config.lookback_days, size=n)
    return [start + datetime.timedelta(days=int(o)) for o in offsets]


def _inject_criteria(rng, catalog):
    """One event token from each of 3 (sometimes 4) criterion parts."""
    parts = catalog.as_parts()
    n_parts = 3 if rng.random() < 0.7 else 4
    chosen = rng.choice(len(CRITERION_PARTS), size=n_parts, replace=False)
    tokens = []
    for part_idx in sorted(chosen):
        options = sorted(parts[CRITERION_PARTS[part_idx]], key=ServiceCode.sort_key)
        tokens.append(options[rng.integers(0, len(options))].token)
    return tokens


def _demographics(rng):
    gender = (Gender.MALE, Gender.FEMALE, Gender.UNKNOWN)[rng.integers(0, 3)]
    age = (AgeGroup.GE60, AgeGroup.LT60, AgeGroup.UNKNOWN)[rng.integers(0, 3)]
    return gender, age


def generate_cohort(config, catalog=None):
    """Generate journeys plus planted truth; byte-deterministic given the seed.

    Positive patients draw Poisson counts with mean
    ``noise_rate + mixture[k] * signal_strength`` on tokens active in block k
    and ``noise_rate`` elsewhere; negatives draw ``noise_rate`` everywhere.
    Every patient (either class) receives criteria events satisfying the
    inclusion rule, so eligibility carries no label signal.
    """
    config.validate()
    catalog = catalog or CriteriaCatalog()
    token_blocks, active_blocks = _planted_vocabulary(config)
    noise_tokens = _noise_vocabulary(config)
    criteria_tokens = [c.token for c in catalog.all_codes()]
    n_vocab = len(token_blocks) + len(noise_tokens) + len(criteria_tokens)
    if n_vocab > config.vocab_budget:
        raise CohortError(
            f"planted vocabulary needs {n_vocab} tokens, exceeding the budget "
            f"of {config.vocab_budget}"
        )

    planted_tokens = sorted(token_blocks, key=lambda t: ServiceCode.from_token(t).sort_key())
    countable = planted_tokens + noise_tokens
    col_of = {t: j for j, t in enumerate(countable)}
    active_mask = np.zeros((config.r_true, len(countable)), dtype=bool)
    for k, tokens in enumerate(active_blocks):
        active_mask[k, [col_of[t] for t in tokens]] = True

    journeys = []
    mixtures = {}
    total = config.n_positive + config.n_negative
    for p in range(total):
        positive = p < config.n_positive
        rng = _patient_rng(config.seed, p)
        patient_id = f"{'pos' if positive else 'neg'}-{p:06d}"
        gender, age = _demographics(rng)

        if positive:
            mixture = rng.dirichlet(np.full(config.r_true, config.mixture_concentration))
            means = np.full(len(countable), config.noise_rate)
            for k in range(config.r_true):
                means[active_mask[k]] += mixture[k] * config.signal_strength
        else:
            mixture = np.zeros(config.r_true)
            means = np.full(len(countable), config.noise_rate)
        mixtures[patient_id] = mixture

        counts = rng.poisson(means)
        if positive and counts.sum() == 0:
            # Keep every row of the folded matrix nonzero.
            home = int(np.argmax(mixture))
            counts[countable.index(active_blocks[home][0])] = 1

        tokens = [t for t, c in zip(countable, counts) for _ in range(int(c))]
        tokens.extend(_inject_criteria(rng, catalog))
        dates = _uniform_dates(rng, config, len(tokens))
        events = [ServiceEvent(d, ServiceCode.from_token(t)) for d, t in zip(dates, tokens)]
        journeys.append(
            PatientJourney(
                patient_id=patient_id,
                gender=gender,
                age_group=age,
                index_date=config.index_date,
                label=1 if positive else 0,
                events=sorted(events, key=ServiceEvent.sort_key),
            )
        )

    truth = PlantedTruth(
        mixtures=mixtures,
        token_blocks=dict(token_blocks),
        block_tokens=[list(b) for b in active_blocks],
    )
    return journeys, truth


def write_truth_mixtures_csv(truth, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    r = len(next(iter(truth.mixtures.values())))
    fh.write("patient_id," + ",".join(f"w_{k}" for k in range(r)) + "\n")
    for patient_id, mixture in truth.mixtures.items():
        fh.write(patient_id + "," + ",".join(f"{v:.10g}" for v in mixture) + "\n")


def write_truth_blocks_csv(truth, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    fh.write("token,phenotype\n")
    for token in sorted(truth.token_blocks):
        fh.write(f"{token},{truth.token_blocks[token]}\n")
