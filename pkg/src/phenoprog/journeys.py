"""Patient journey parsing, service vocabulary, and count-matrix construction.

A journey is a date-ordered sequence of categorized service tokens
(``px-``/``dx-``/``rx-`` prefix + lowercase category). Journeys are binned
into per-week count matrices over a fixed look-back window, then folded
over time and stacked into a patients-by-services count matrix.
"""

import datetime
import enum
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import PhenoprogError


class IngestError(PhenoprogError):
    """Structural problem in journey data (bad window, shape mismatch, ...)."""


class JourneyParseError(IngestError):
    """A record line could not be parsed; message carries the line number."""


class ServiceKind(enum.Enum):
    PROCEDURE = "px"
    DIAGNOSIS = "dx"
    PRESCRIPTION = "rx"

    @property
    def sort_rank(self):
        # Same-day ordering: procedure first, diagnosis second, prescription last.
        return _KIND_RANK[self]


_KIND_RANK = {
    ServiceKind.PROCEDURE: 0,
    ServiceKind.DIAGNOSIS: 1,
    ServiceKind.PRESCRIPTION: 2,
}

_PREFIX_TO_KIND = {k.value: k for k in ServiceKind}


@dataclass(frozen=True, order=False)
class ServiceCode:
    """A categorized clinical service, canonically ``<px|dx|rx>-<category>``."""

    kind: ServiceKind
    category: str

    def __post_init__(self):
        if not self.category or self.category != self.category.lower():
            raise IngestError(f"service category must be lowercase and non-empty: {self.category!r}")

    @property
    def token(self):
        return f"{self.kind.value}-{self.category}"

    @classmethod
    def from_token(cls, token):
        prefix, sep, category = token.partition("-")
        if not sep or prefix not in _PREFIX_TO_KIND:
            raise IngestError(f"unknown service kind prefix in token {token!r}")
        return cls(_PREFIX_TO_KIND[prefix], category.lower())

    def sort_key(self):
        return (self.kind.sort_rank, self.category)

    def __str__(self):
        return self.token


class Gender(enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"


class AgeGroup(enum.Enum):
    GE60 = "ge60"
    LT60 = "lt60"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ServiceEvent:
    date: datetime.date
    service: ServiceCode

    def sort_key(self):
        return (self.date.toordinal(),) + self.service.sort_key()


@dataclass
class PatientJourney:
    """One patient's demographics, label, and ordered service events."""

    patient_id: str
    gender: Gender
    age_group: AgeGroup
    index_date: datetime.date
    label: int
    events: list

    def sorted_events(self):
        return sorted(self.events, key=ServiceEvent.sort_key)


@dataclass
class Vocabulary:
    """Ordered service tokens with a token -> column index map."""

    tokens: list
    index: dict = field(default_factory=dict)
    prevalence: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {code.token: i for i, code in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise IngestError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def column(self, token):
        return self.index[token]

    def token_strings(self):
        return [code.token for code in self.tokens]

    def same_tokens(self, other):
        return other is not None and self.token_strings() == other.token_strings()


@dataclass
class WeeklyCountMatrix:
    """Per-patient counts, services x weeks; week t covers days [7t, 7t+7)."""

    patient_id: str
    counts: np.ndarray
    vocab: Vocabulary


@dataclass
class PatientServiceMatrix:
    """Stacked temporally-folded counts, patients x services, stored sparsely."""

    patient_ids: list
    values: sparse.csr_array
    vocab: Vocabulary = None

    @property
    def shape(self):
        return self.values.shape

    def toarray(self):
        return self.values.toarray()

    def row(self, p):
        return self.values[[p], :].toarray()[0]


@dataclass
class IngestReport:
    """Tallies for records and events excluded during ingest."""

    rejected_records: list = field(default_factory=list)
    dropped_events: int = 0
    dropped_by_token: Counter = field(default_factory=Counter)

    def to_dict(self):
        return {
            "rejected_records": [list(r) for r in self.rejected_records],
            "dropped_events": self.dropped_events,
            "dropped_by_token": dict(sorted(self.dropped_by_token.items())),
        }


_REQUIRED_FIELDS = ("patient_id", "gender", "age_group", "index_date", "label", "events")


def _parse_record(obj):
    for name in _REQUIRED_FIELDS:
        if name not in obj:
            raise KeyError(name)
    gender = Gender(obj["gender"])
    age_group = AgeGroup(obj["age_group"])
    index_date = datetime.date.fromisoformat(obj["index_date"])
    label = int(obj["label"])
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    events = [
        ServiceEvent(datetime.date.fromisoformat(e["date"]), ServiceCode.from_token(e["code"]))
        for e in obj["events"]
    ]
    return PatientJourney(
        patient_id=str(obj["patient_id"]),
        gender=gender,
        age_group=age_group,
        index_date=index_date,
        label=label,
        events=sorted(events, key=ServiceEvent.sort_key),
    )


def parse_journeys(lines, report=None):
    """Parse line-delimited journey records.

    Malformed lines raise :class:`JourneyParseError` with the line number.
    Records containing an unknown service-kind prefix are skipped and, when
    a ``report`` is given, tallied in ``report.rejected_records``.
    """
    journeys = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise JourneyParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        try:
            journeys.append(_parse_record(obj))
        except IngestError as exc:
            # Unknown kind prefix: reject the record, keep going.
            if report is not None:
                report.rejected_records.append((lineno, str(obj.get("patient_id", "?")), str(exc)))
            continue
        except (KeyError, ValueError, TypeError) as exc:
            raise JourneyParseError(f"line {lineno}: malformed record ({exc})") from exc
    return journeys


def journey_to_record(journey):
    return {
        "patient_id": journey.patient_id,
        "gender": journey.gender.value,
        "age_group": journey.age_group.value,
        "index_date": journey.index_date.isoformat(),
        "label": journey.label,
        "events": [
            {"date": e.date.isoformat(), "code": e.service.token} for e in journey.sorted_events()
        ],
    }


def serialize_journeys(journeys):
    """Inverse of :func:`parse_journeys`; yields one JSON line per patient."""
    for journey in journeys:
        yield json.dumps(journey_to_record(journey), sort_keys=False)


def resolve_vocabulary(journeys, prevalence_cutoff):
    """Retain service tokens present in >= ``prevalence_cutoff`` of patients.

    Prevalence is patient-level (a token counts once per patient no matter
    how often it recurs) and the boundary is inclusive. Retained tokens are
    ordered kind-first (px, dx, rx) then alphabetically by category.
    """
    if not journeys:
        raise IngestError("cannot resolve a vocabulary from zero journeys")
    if not 0.0 <= prevalence_cutoff <= 1.0:
        raise IngestError(f"prevalence_cutoff must be in [0, 1], got {prevalence_cutoff}")
    patient_counts = Counter()
    codes = {}
    for journey in journeys:
        seen = {e.service.token: e.service for e in journey.events}
        patient_counts.update(seen.keys())
        codes.update(seen)
    n = len(journeys)
    kept = [
        codes[token]
        for token, count in patient_counts.items()
        if count / n >= prevalence_cutoff
    ]
    kept.sort(key=ServiceCode.sort_key)
    prevalence = {code.token: patient_counts[code.token] / n for code in kept}
    return Vocabulary(tokens=kept, prevalence=prevalence)


def bin_weekly(journey, vocab, lookback_days, report=None):
    """Bin a journey's in-vocabulary events into a services x weeks count matrix.

    The window covers ``[index_date - lookback_days, index_date)`` with week
    boundaries anchored at the window start. Out-of-vocabulary events are
    dropped (tallied in ``report``); out-of-window events raise.
    """
    if lookback_days <= 0 or lookback_days % 7 != 0:
        raise IngestError(f"lookback_days must be a positive multiple of 7, got {lookback_days}")
    n_weeks = lookback_days // 7
    window_start = journey.index_date - datetime.timedelta(days=lookback_days)
    counts = np.zeros((len(vocab), n_weeks), dtype=np.int64)
    for event in journey.events:
        day = (event.date - window_start).days
        if day < 0 or day >= lookback_days:
            raise IngestError(
                f"patient {journey.patient_id}: event on {event.date.isoformat()} "
                f"outside look-back window [{window_start.isoformat()}, "
                f"{journey.index_date.isoformat()})"
            )
        token = event.service.token
        if token in vocab:
            counts[vocab.column(token), day // 7] += 1
        elif report is not None:
            report.dropped_events += 1
            report.dropped_by_token[token] += 1
    return WeeklyCountMatrix(patient_id=journey.patient_id, counts=counts, vocab=vocab)


def fold_and_stack(matrices):
    """Sum each weekly matrix over time and stack the rows into one matrix."""
    if not matrices:
        raise IngestError("fold_and_stack requires at least one matrix")
    n_services = matrices[0].counts.shape[0]
    rows = []
    for m in matrices:
        if m.counts.shape[0] != n_services:
            raise IngestError(
                f"patient {m.patient_id}: service dimension {m.counts.shape[0]} != {n_services}"
            )
        rows.append(m.counts.sum(axis=1))
    dense = np.stack(rows)
    return PatientServiceMatrix(
        patient_ids=[m.patient_id for m in matrices],
        values=sparse.csr_array(dense),
        vocab=matrices[0].vocab,
    )


def build_patient_service_matrix(journeys, vocab, lookback_days, report=None):
    """Convenience: bin every journey weekly, then fold and stack."""
    weekly = [bin_weekly(j, vocab, lookback_days, report=report) for j in journeys]
    return fold_and_stack(weekly)


def write_vocabulary_tsv(vocab, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    fh.write("token\tkind\tpatient_prevalence\n")
    for code in vocab.tokens:
        prev = vocab.prevalence.get(code.token, float("nan"))
        fh.write(f"{code.token}\t{code.kind.name.lower()}\t{prev:.6f}\n")


def read_vocabulary_tsv(fh):
    tokens, prevalence = [], {}
    for line in fh:
        line = line.rstrip("\n")
        if not line or line.startswith("#") or line.startswith("token\t"):
            continue
        token, _kind, prev = line.split("\t")
        tokens.append(ServiceCode.from_token(token))
        prevalence[token] = float(prev)
    return Vocabulary(tokens=tokens, prevalence=prevalence)


def write_patient_service_csv(psm, fh, header=None):
    """Sparse triplet CSV: patient_id,token,count for every nonzero cell."""
    if header:
        fh.write(f"# {header}\n")
    fh.write("patient_id,token,count\n")
    tokens = psm.vocab.token_strings() if psm.vocab else [str(j) for j in range(psm.shape[1])]
    coo = psm.values.tocoo()
    order = np.lexsort((coo.col, coo.row))
    for k in order:
        fh.write(f"{psm.patient_ids[coo.row[k]]},{tokens[coo.col[k]]},{coo.data[k]}\n")


def read_patient_service_csv(fh, vocab):
    """Rebuild a PatientServiceMatrix from triplets, rows in first-seen order."""
    patient_ids = []
    row_of = {}
    rows, cols, data = [], [], []
    for line in fh:
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("patient_id,"):
            continue
        patient_id, token, count = line.split(",")
        if patient_id not in row_of:
            row_of[patient_id] = len(patient_ids)
            patient_ids.append(patient_id)
        rows.append(row_of[patient_id])
        cols.append(vocab.column(token))
        data.append(int(count))
    values = sparse.csr_array(
        (data, (rows, cols)), shape=(len(patient_ids), len(vocab)), dtype=np.int64
    )
    return PatientServiceMatrix(patient_ids=patient_ids, values=values, vocab=vocab)
