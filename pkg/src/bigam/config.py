"""JSON model configuration.

Example::

    {
      "schema_version": 1,
      "kind": "triangular_ordinal",
      "copula": "gaussian",
      "responses": [{"column": "y1", "type": "ordinal", "levels": 5},
                    {"column": "y2", "type": "ordinal", "levels": 6}],
      "equations": [
        [{"type": "linear", "column": "x1"}, {"type": "smooth", "column": "v1", "basis_dim": 10}],
        [{"type": "smooth", "column": "v1"}]
      ],
      "fit": {"tol": 1e-6, "kappa": 1.0}
    }

Term types are ``linear``, ``smooth``, ``mrf`` (with ``adjacency``, a path
to an edge-list file or an inline ``{"regions": R, "edges": [[r, s], ...]}``)
and ``random``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .copula import parse_copula
from .fit import FitOptions
from .model import KINDS, ModelTriplet, ResponseSpec, TermSpec
from .penalty import Adjacency, read_adjacency

SCHEMA_VERSION = 1

__all__ = ["SCHEMA_VERSION", "ConfigError", "ModelConfig", "load_config"]


class ConfigError(ValueError):
    pass


def _term(d, base: Path | None):
    if not isinstance(d, dict) or "type" not in d or "column" not in d:
        raise ConfigError(f"term needs 'type' and 'column': {d!r}")
    extra = set(d) - {"type", "column", "basis_dim", "degree", "penalty_order", "adjacency"}
    if extra:
        raise ConfigError(f"unknown term keys {sorted(extra)}")
    adj = None
    if d["type"] == "mrf":
        a = d.get("adjacency")
        if a is None:
            raise ConfigError(f"mrf term on {d['column']!r} needs 'adjacency'")
        try:
            if isinstance(a, str):
                path = Path(a) if base is None or Path(a).is_absolute() else base / a
                adj = read_adjacency(path)
            else:
                adj = Adjacency.from_edges(int(a["regions"]), a.get("edges", []))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad adjacency for {d['column']!r}: {exc}") from exc
    try:
        return TermSpec(
            d["type"],
            str(d["column"]),
            int(d.get("basis_dim", 10)),
            int(d.get("degree", 3)),
            int(d.get("penalty_order", 2)),
            adj,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ModelConfig:
    kind: str
    responses: list          # [(column, ResponseSpec)]
    equations: list
    copula: str = "gaussian"
    fit: FitOptions = field(default_factory=FitOptions)
    raw: dict = field(default_factory=dict)

    @property
    def response_columns(self):
        return [c for c, _ in self.responses]

    def columns(self):
        cols = list(self.response_columns)
        for eq in self.equations:
            cols += [t.column for t in eq]
        return list(dict.fromkeys(cols))

    def triplet(self) -> ModelTriplet:
        try:
            return ModelTriplet(self.kind, tuple(r for _, r in self.responses), self.equations, parse_copula(self.copula))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d, base: Path | None = None):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        kind = d.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"'kind' must be one of {KINDS}, got {kind!r}")
        resp = d.get("responses")
        if not isinstance(resp, list) or len(resp) != 2:
            raise ConfigError("'responses' must list exactly two margins")
        responses = []
        for r in resp:
            try:
                rtype = r.get("type", "binary")
                levels = int(r.get("levels", 2))
                responses.append((str(r["column"]), ResponseSpec(rtype, levels)))
            except (KeyError, AttributeError, ValueError, TypeError) as exc:
                raise ConfigError(f"bad response entry {r!r}: {exc}") from exc
        eqs = d.get("equations")
        if not isinstance(eqs, list) or len(eqs) not in (2, 3):
            raise ConfigError("'equations' must hold two or three term lists")
        if len(eqs) == 3 and kind in ("biv_ordinal_gaussian", "triangular_ordinal") and eqs[2]:
            raise ConfigError(f"{kind} has no association equation")
        equations = [[_term(t, base) for t in eq] for eq in eqs]
        try:
            copula = d.get("copula", "gaussian")
            parse_copula(copula)
            fit = FitOptions(**d.get("fit", {}))
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(kind, responses, equations, copula, fit, dict(d))
        cfg.triplet()
        return cfg

    def resolved(self):
        """Fully expanded configuration, for output records."""
        out = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "copula": self.copula,
            "responses": [{"column": c, "type": r.kind, "levels": r.levels} for c, r in self.responses],
            "equations": [],
            "fit": {
                "max_outer": self.fit.max_outer,
                "max_inner": self.fit.max_inner,
                "tol": self.fit.tol,
                "kappa": self.fit.kappa,
                "seed": self.fit.seed,
            },
        }
        for eq in self.equations:
            terms = []
            for t in eq:
                td = {"type": t.kind, "column": t.column}
                if t.kind == "smooth":
                    td.update(basis_dim=t.basis_dim, degree=t.degree, penalty_order=t.penalty_order)
                if t.adjacency is not None:
                    edges = sorted({(min(r, s) + 1, max(r, s) + 1)
                                    for r, nb in enumerate(t.adjacency.neighbor_sets) for s in nb})
                    td["adjacency"] = {"regions": t.adjacency.region_count, "edges": [list(e) for e in edges]}
                terms.append(td)
            out["equations"].append(terms)
        return out


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ModelConfig.from_dict(d, base=path.parent)
