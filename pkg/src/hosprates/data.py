"""Grouped binary-outcome data: records, CSV ingestion, splitting, design.

CSV schemas (UTF-8, comma-delimited, ``.`` decimal):

* patients: ``patient_id,hospital_id,outcome,age,admit_period,x1,...,xd``
  with outcome in {0,1}
* hospitals: ``hospital_id,volume,ntbr,rtbr,pci,beds`` with pci in {0,1};
  beds may be empty

Row numbers in error messages are file line numbers (the header is line 1).
"""

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import splines
from .util import format_float

__all__ = ["DataError", "Dataset", "DesignBundle", "HospitalRecord",
           "PatientRecord", "build_design", "design_for", "load_dataset",
           "split_by_period", "write_hospitals_csv", "write_patients_csv"]

HOSPITAL_ATTRS = ("ntbr", "rtbr", "pci", "beds")


class DataError(ValueError):
    """Raised for schema violations and invariant breaks, with row context."""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    hospital_id: str
    outcome: int
    age: float
    admit_period: int
    covariates: tuple


@dataclass(frozen=True)
class HospitalRecord:
    hospital_id: str
    volume: int
    attributes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Dataset:
    """Validated dataset with derived group sizes and grand mean outcome."""

    patients: tuple
    hospitals: tuple
    covariate_names: tuple
    n_h: np.ndarray            # patients per hospital, aligned with ``hospitals``
    ybar: float
    cold_start_ids: tuple = () # hospitals with no patients in this split

    @property
    def N(self) -> int:
        return len(self.patients)

    @property
    def H(self) -> int:
        return len(self.hospitals)

    def hospital_index(self) -> dict:
        return {h.hospital_id: i for i, h in enumerate(self.hospitals)}

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for p in self.patients:
            digest.update(f"{p.patient_id},{p.hospital_id},{p.outcome}\n".encode())
        return digest.hexdigest()[:16]


def _assemble(patients, hospitals, covariate_names) -> Dataset:
    index = {h.hospital_id: i for i, h in enumerate(hospitals)}
    n_h = np.zeros(len(hospitals), dtype=np.int64)
    deaths = 0
    for p in patients:
        n_h[index[p.hospital_id]] += 1
        deaths += p.outcome
    ybar = deaths / len(patients) if patients else 0.0
    cold = tuple(h.hospital_id for h, n in zip(hospitals, n_h) if n == 0)
    return Dataset(patients=tuple(patients), hospitals=tuple(hospitals),
                   covariate_names=tuple(covariate_names), n_h=n_h,
                   ybar=float(ybar), cold_start_ids=cold)


def _parse_float(text, what, row):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"invalid {what} {text!r} at row {row}") from None


def load_dataset(patients_path, hospitals_path) -> Dataset:
    """Load and validate the patients/hospitals CSV pair."""
    hospitals = []
    seen = set()
    with open(hospitals_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["hospital_id", "volume", "ntbr", "rtbr", "pci", "beds"]
        if header is None or [c.strip() for c in header] != expected:
            raise DataError(f"hospitals file must have header {','.join(expected)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"wrong column count at row {row_no} of hospitals file")
            hid = row[0].strip()
            if hid in seen:
                raise DataError(f"duplicate hospital_id {hid} at row {row_no}")
            seen.add(hid)
            volume = _parse_float(row[1], "volume", row_no)
            if volume < 0 or volume != int(volume):
                raise DataError(f"volume must be a nonnegative integer at row {row_no}")
            pci = _parse_float(row[4], "pci", row_no)
            if pci not in (0.0, 1.0):
                raise DataError(f"pci must be 0 or 1 at row {row_no}")
            attrs = {
                "ntbr": _parse_float(row[2], "ntbr", row_no),
                "rtbr": _parse_float(row[3], "rtbr", row_no),
                "pci": pci,
            }
            if row[5].strip():
                beds = _parse_float(row[5], "beds", row_no)
                if beds < 0:
                    raise DataError(f"beds must be nonnegative at row {row_no}")
                attrs["beds"] = beds
            hospitals.append(HospitalRecord(hid, int(volume), attrs))
    if not hospitals:
        raise DataError("hospitals file has no rows")

    known = {h.hospital_id for h in hospitals}
    patients = []
    with open(patients_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        fixed = ["patient_id", "hospital_id", "outcome", "age", "admit_period"]
        if header is None or [c.strip() for c in header[:5]] != fixed:
            raise DataError(
                "patients file must start with columns " + ",".join(fixed))
        covariate_names = [c.strip() for c in header[5:]]
        if not covariate_names:
            raise DataError("patients file declares no covariate columns")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5 + len(covariate_names):
                raise DataError(f"wrong column count at row {row_no} of patients file")
            hid = row[1].strip()
            if hid not in known:
                raise DataError(f"unresolved hospital_id {hid} at row {row_no}")
            outcome = row[2].strip()
            if outcome not in ("0", "1"):
                raise DataError(f"non-binary outcome {outcome!r} at row {row_no}")
            age = _parse_float(row[3], "age", row_no)
            try:
                period = int(row[4])
            except ValueError:
                raise DataError(f"invalid admit_period {row[4]!r} at row {row_no}") from None
            covs = tuple(_parse_float(v, f"covariate {covariate_names[i]}", row_no)
                         for i, v in enumerate(row[5:]))
            patients.append(PatientRecord(row[0].strip(), hid, int(outcome),
                                          age, period, covs))
    if not patients:
        raise DataError("patients file has no rows")
    return _assemble(patients, hospitals, covariate_names)


def write_patients_csv(path, dataset: Dataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "hospital_id", "outcome", "age", "admit_period",
                    *dataset.covariate_names])
        for p in dataset.patients:
            w.writerow([p.patient_id, p.hospital_id, p.outcome,
                        format_float(p.age), p.admit_period,
                        *[format_float(x) for x in p.covariates]])


def write_hospitals_csv(path, dataset: Dataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hospital_id", "volume", "ntbr", "rtbr", "pci", "beds"])
        for h in dataset.hospitals:
            beds = h.attributes.get("beds")
            w.writerow([h.hospital_id, h.volume,
                        format_float(h.attributes.get("ntbr", 0.0)),
                        format_float(h.attributes.get("rtbr", 0.0)),
                        int(h.attributes.get("pci", 0)),
                        "" if beds is None else format_float(beds)])


def split_by_period(dataset: Dataset, cutoff: int):
    """Partition into (train, validation) at the admit-period cutoff.

    Train keeps periods <= cutoff.  The hospital list is shared; validation
    hospitals without training patients are flagged on the train dataset's
    ``cold_start_ids`` (their effects come from the fitted random-effects
    law at prediction time).
    """
    periods = {p.admit_period for p in dataset.patients}
    if cutoff not in periods:
        raise DataError(f"cutoff {cutoff} not present in the admit_period domain")
    train_p = [p for p in dataset.patients if p.admit_period <= cutoff]
    valid_p = [p for p in dataset.patients if p.admit_period > cutoff]
    if not train_p:
        raise DataError("empty training split")
    if not valid_p:
        raise DataError("empty validation split")
    train = _assemble(train_p, dataset.hospitals, dataset.covariate_names)
    valid = _assemble(valid_p, dataset.hospitals, dataset.covariate_names)
    return train, valid


@dataclass(frozen=True)
class ColumnTransform:
    """Standardization transform for the patient design (incl. interaction)."""

    names: tuple
    means: np.ndarray
    scales: np.ndarray

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.means) / self.scales

    def invert(self, std: np.ndarray) -> np.ndarray:
        return std * self.scales + self.means


@dataclass(frozen=True)
class DesignBundle:
    """Immutable numeric views of a dataset under one model specification.

    Patient side: standardized design ``X`` (with the interaction column
    last when requested), outcomes, hospital membership.  Hospital side:
    log-volumes, spline basis rows, standardized attribute matrix for the
    linear mean terms.  The transform is stored so counterfactual designs
    and validation data reuse the training standardization.
    """

    spec_hash: str
    data_hash: str
    hospital_ids: tuple
    patient_ids: tuple
    X: np.ndarray
    col_names: tuple
    transform: ColumnTransform
    y: np.ndarray
    age: np.ndarray
    hosp_idx: np.ndarray
    n_h: np.ndarray
    ybar: float
    volume: np.ndarray
    log_volume: np.ndarray
    basis: object            # SplineBasis or None
    basis_rows: np.ndarray   # (H, k) or None
    penalty: object          # PenaltyMatrix or None
    attr_names: tuple
    attr_matrix: np.ndarray  # (H, r) standardized, or None
    attr_transform: object   # ColumnTransform for hospital attributes, or None
    interaction_col: int     # index into X, or -1

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def H(self) -> int:
        return len(self.hospital_ids)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def sum_y_minus_half(self) -> np.ndarray:
        return np.bincount(self.hosp_idx, weights=self.y - 0.5, minlength=self.H)


def _standardize_columns(raw, names):
    means = np.zeros(raw.shape[1])
    scales = np.ones(raw.shape[1])
    for j in range(raw.shape[1]):
        col = raw[:, j]
        if np.isin(col, (0.0, 1.0)).all():
            continue  # binary indicators stay on their natural scale
        sd = col.std()
        if sd == 0:
            raise DataError(f"zero-variance column {names[j]} cannot be standardized")
        means[j] = col.mean()
        scales[j] = sd
    return ColumnTransform(names=tuple(names), means=means, scales=scales)


def build_design(dataset: Dataset, spec, transform: ColumnTransform | None = None,
                 basis=None, hospital_transform=None) -> DesignBundle:
    """Build the numeric design for ``dataset`` under ``spec``.

    Pass the training bundle's ``transform``/``basis``/``hospital_transform``
    when preparing validation data so both splits live on the same scale.
    """
    from .models import ModelSpec  # local import to keep module load light

    assert isinstance(spec, ModelSpec)
    index = dataset.hospital_index()
    N, H = dataset.N, dataset.H

    y = np.fromiter((p.outcome for p in dataset.patients), dtype=np.float64, count=N)
    age = np.fromiter((p.age for p in dataset.patients), dtype=np.float64, count=N)
    hosp_idx = np.fromiter((index[p.hospital_id] for p in dataset.patients),
                           dtype=np.int64, count=N)
    volume = np.fromiter((h.volume for h in dataset.hospitals), dtype=np.float64,
                         count=H)
    log_volume = np.log1p(volume)

    raw = np.array([p.covariates for p in dataset.patients], dtype=np.float64)
    names = list(dataset.covariate_names)
    if spec.interaction:
        if not np.all(age > 0):
            raise DataError("age must be positive when the interaction is requested")
        inter = age * log_volume[hosp_idx]
        raw = np.column_stack([raw, inter])
        names.append("age_x_logvol")
        interaction_col = raw.shape[1] - 1
    else:
        interaction_col = -1

    if transform is None:
        transform = _standardize_columns(raw, names)
    elif transform.names != tuple(names):
        raise DataError("stored transform does not match this design's columns")
    X = transform.apply(raw)

    basis_rows = None
    penalty = None
    if spec.uses_spline:
        if basis is None:
            basis, basis_rows = splines.build_basis(log_volume, spec.spline.degree,
                                                    spec.spline.knots)
        else:
            basis_rows = basis.evaluate(log_volume)
        penalty = splines.build_penalty(basis.k, spec.spline.ridge)
    else:
        basis = None

    attr_names = tuple(spec.mean.linear_attrs)
    attr_matrix = None
    if attr_names:
        try:
            raw_attrs = np.array([[h.attributes[a] for a in attr_names]
                                  for h in dataset.hospitals], dtype=np.float64)
        except KeyError as exc:
            raise DataError(f"hospital schema is missing attribute {exc}") from exc
        if hospital_transform is None:
            hospital_transform = _standardize_columns(raw_attrs, attr_names)
        attr_matrix = hospital_transform.apply(raw_attrs)

    return DesignBundle(
        spec_hash=spec.spec_hash(),
        data_hash=dataset.fingerprint(),
        hospital_ids=tuple(h.hospital_id for h in dataset.hospitals),
        patient_ids=tuple(p.patient_id for p in dataset.patients),
        X=X, col_names=tuple(names), transform=transform,
        y=y, age=age, hosp_idx=hosp_idx, n_h=dataset.n_h.copy(),
        ybar=dataset.ybar, volume=volume, log_volume=log_volume,
        basis=basis, basis_rows=basis_rows, penalty=penalty,
        attr_names=attr_names, attr_matrix=attr_matrix,
        attr_transform=hospital_transform,
        interaction_col=interaction_col,
    )


def design_for(train_bundle: DesignBundle, dataset: Dataset, spec) -> DesignBundle:
    """Design for another split of the same hospitals, on the training scale."""
    ids = tuple(h.hospital_id for h in dataset.hospitals)
    if ids != train_bundle.hospital_ids:
        raise DataError("dataset does not share the training hospital list")
    return build_design(dataset, spec, transform=train_bundle.transform,
                        basis=train_bundle.basis,
                        hospital_transform=train_bundle.attr_transform)
