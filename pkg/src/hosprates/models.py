"""Declarative model families and prior hyperparameters.

Four named presets cover the grid actually used in reporting:

* ``CC``   constant random-effect mean, constant variance
* ``LC``   mean linear in log(volume+1), constant variance
* ``SL``   penalized-spline mean in log-volume, log-linear variance
* ``SLIL`` spline + linear hospital attributes (ntbr, rtbr, pci),
  log-linear variance, and an age x log-volume patient interaction

All inverse-gamma priors are parameterized as shape/scale with density
proportional to ``x**(-a-1) * exp(-b/x)``; the default (1, 1) for every
hyperparameter is heavy tailed and close to noninfluential.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .util import canonical_json, sha256_short

__all__ = ["MeanFamily", "ModelSpec", "SplineSettings", "VarianceFamily",
           "mu_h", "sigma2_h"]

MEAN_KINDS = ("constant", "linear", "spline", "spline_linear")
VARIANCE_KINDS = ("constant", "loglinear")

_DEFAULT_PRIORS = {
    "sigma2_beta": (1.0, 1.0),
    "sigma2_alpha": (1.0, 1.0),
    "g": (1.0, 1.0),
    "g_S": (1.0, 1.0),
    "g_L": (1.0, 1.0),
    "g_delta": (1.0, 1.0),
}


@dataclass(frozen=True)
class MeanFamily:
    """Mean of the hospital-effect distribution as a function of attributes.

    ``attribute`` names the column driving the linear/spline term (volume by
    default, entering as log(value+1) for the mean).  ``linear_attrs`` are
    the extra hospital attributes added as linear terms in the
    ``spline_linear`` family.
    """

    kind: str = "constant"
    attribute: str = "volume"
    linear_attrs: tuple = ()

    def __post_init__(self):
        if self.kind not in MEAN_KINDS:
            raise ValueError(f"unknown mean family {self.kind!r}")
        if self.kind == "spline_linear" and self.attribute in self.linear_attrs:
            raise ValueError("linear attributes must exclude the spline variable")


@dataclass(frozen=True)
class VarianceFamily:
    """Variance of the hospital-effect distribution: constant or
    exp(delta * volume) * sigma2_alpha (volume in raw counts)."""

    kind: str = "constant"

    def __post_init__(self):
        if self.kind not in VARIANCE_KINDS:
            raise ValueError(f"unknown variance family {self.kind!r}")


@dataclass(frozen=True)
class SplineSettings:
    degree: int = 3
    knots: int = 17
    ridge: float | None = None


@dataclass(frozen=True)
class ModelSpec:
    mean: MeanFamily = MeanFamily()
    variance: VarianceFamily = VarianceFamily()
    interaction: bool = False
    spline: SplineSettings = SplineSettings()
    priors: tuple = field(default_factory=lambda: tuple(sorted(_DEFAULT_PRIORS.items())))
    name: str = "custom"

    @staticmethod
    def preset(name: str) -> "ModelSpec":
        key = name.upper().replace(",", "").replace("(", "").replace(")", "")
        if key == "CC":
            return ModelSpec(name="CC")
        if key == "LC":
            return ModelSpec(mean=MeanFamily("linear"), name="LC")
        if key == "SL":
            return ModelSpec(mean=MeanFamily("spline"),
                             variance=VarianceFamily("loglinear"), name="SL")
        if key == "SLIL":
            return ModelSpec(
                mean=MeanFamily("spline_linear", linear_attrs=("ntbr", "rtbr", "pci")),
                variance=VarianceFamily("loglinear"),
                interaction=True,
                name="SLIL",
            )
        raise ValueError(f"unknown preset {name!r}")

    def prior(self, key: str) -> tuple:
        return dict(self.priors)[key]

    def to_config(self) -> dict:
        return {
            "mean": {"kind": self.mean.kind, "attribute": self.mean.attribute,
                     "linear_attrs": list(self.mean.linear_attrs)},
            "variance": {"kind": self.variance.kind},
            "interaction": self.interaction,
            "spline": {"degree": self.spline.degree, "knots": self.spline.knots,
                       "ridge": self.spline.ridge},
            "priors": {k: list(v) for k, v in self.priors},
            "name": self.name,
        }

    @staticmethod
    def from_config(cfg: dict) -> "ModelSpec":
        if "preset" in cfg:
            return ModelSpec.preset(cfg["preset"])
        mean_cfg = cfg.get("mean", {})
        mean = MeanFamily(
            kind=mean_cfg.get("kind", "constant"),
            attribute=mean_cfg.get("attribute", "volume"),
            linear_attrs=tuple(mean_cfg.get("linear_attrs", ())),
        )
        variance = VarianceFamily(kind=cfg.get("variance", {}).get("kind", "constant"))
        sp = cfg.get("spline", {})
        spline = SplineSettings(degree=sp.get("degree", 3), knots=sp.get("knots", 17),
                                ridge=sp.get("ridge"))
        priors = dict(_DEFAULT_PRIORS)
        for k, v in cfg.get("priors", {}).items():
            if k not in priors:
                raise ValueError(f"unknown prior key {k!r}")
            priors[k] = (float(v[0]), float(v[1]))
        return ModelSpec(mean=mean, variance=variance,
                         interaction=bool(cfg.get("interaction", False)),
                         spline=spline, priors=tuple(sorted(priors.items())),
                         name=cfg.get("name", "custom"))

    @staticmethod
    def from_json(path) -> "ModelSpec":
        with open(path) as fh:
            return ModelSpec.from_config(json.load(fh))

    def spec_hash(self) -> str:
        return sha256_short(canonical_json(self.to_config()))

    @property
    def has_delta(self) -> bool:
        return self.variance.kind == "loglinear"

    @property
    def uses_spline(self) -> bool:
        return self.mean.kind in ("spline", "spline_linear")


def mu_h(spec: ModelSpec, params, hospital=None, basis_row=None, attrs=None,
         log_volume=None) -> float:
    """Random-effect mean for one hospital under the current parameter draw.

    ``params`` holds the draw (``mu_alpha``, ``gamma0``/``gamma1``,
    ``gamma_S``, ``gamma_L`` as the family requires).  Inputs may be given
    explicitly or pulled from a hospital record.
    """
    kind = spec.mean.kind
    if kind == "constant":
        return float(params["mu_alpha"])
    if kind == "linear":
        if log_volume is None:
            value = (hospital.volume if spec.mean.attribute == "volume"
                     else hospital.attributes[spec.mean.attribute])
            log_volume = np.log(value + 1.0)
        return float(params["gamma0"] + params["gamma1"] * log_volume)
    if basis_row is None:
        raise ValueError("spline families need a basis row")
    out = float(np.dot(basis_row, params["gamma_S"]))
    if kind == "spline_linear":
        if attrs is None:
            try:
                attrs = [hospital.attributes[a] for a in spec.mean.linear_attrs]
            except KeyError as exc:
                raise KeyError(f"hospital is missing attribute {exc}") from exc
        out += float(np.dot(np.asarray(attrs, dtype=np.float64), params["gamma_L"]))
    return out


def sigma2_h(spec: ModelSpec, params, hospital=None, volume=None) -> float:
    """Random-effect variance for one hospital under the current draw."""
    s2 = float(params["sigma2_alpha"])
    if s2 <= 0:
        raise ValueError("sigma2_alpha must be positive")
    if spec.variance.kind == "constant":
        return s2
    if volume is None:
        volume = hospital.volume
    return float(np.exp(params["delta"] * volume) * s2)
