"""Experiment configuration, orchestration and result aggregation."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from typing import Optional, Sequence

import numpy as np

from vfboost.boost import BoostParams, Dataset, predict, train_centralized
from vfboost.data import gen_synthetic, load_csv, stratified_split, vertical_split
from vfboost.errors import CalibrationError, SchemaError
from vfboost.metrics import auc
from vfboost.privacy.accountant import PrivacyConfig
from vfboost.privacy.calibration import calibrate
from vfboost.protocol.training import train_ldp_baseline, train_masked

logger = logging.getLogger(__name__)

METHODS = ("centralized", "masked", "ldp-baseline")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _int_list(text: str) -> tuple[int, ...]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs; mirrors the flat config file keys.

    `data` is "synthetic" or a CSV path. `delta_pp` of None means 1/n with n the
    training set size. Empty `ap_columns`/`pp_columns` on synthetic data use the
    generated ap*/pp* columns; on CSV data the first half of the columns go to
    AP.
    """

    data: str = "synthetic"
    label_column: str = "label"
    n: int = 4000
    d_ap: int = 3
    d_pp: int = 3
    balance: float = 0.5
    label_noise: float = 0.1
    separation: float = 2.0
    data_seed: int = 0
    ap_columns: tuple[str, ...] = ()
    pp_columns: tuple[str, ...] = ()
    rounds: int = 20
    depth: int = 4
    lam: float = 1.0
    gamma: float = 0.0
    eta: float = 0.3
    candidates: int = 32
    eps_ap: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    delta_ap: float = 1e-3
    eps_pp: float = 1.0
    delta_pp: Optional[float] = None
    W: int = 1
    composition: str = "advanced"
    pp_accounting: str = "per-release"
    releases_per_node: int = 1
    sigma1: float = 1.0
    mc_samples: int = 10**6
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = tuple(range(10))
    test_fraction: float = 0.2
    workers: int = 1
    out: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if set(self.ap_columns) & set(self.pp_columns):
            raise ValueError("AP and PP columns must be disjoint")
        if not self.eps_ap:
            raise ValueError("eps_ap grid must not be empty")

    @property
    def boost_params(self) -> BoostParams:
        return BoostParams(rounds=self.rounds, max_depth=self.depth,
                           lam=self.lam, gamma=self.gamma, eta=self.eta,
                           candidates=self.candidates)

    def privacy_config(self, eps_ap: float, n: int) -> PrivacyConfig:
        return PrivacyConfig(eps_ap=eps_ap, delta_ap=self.delta_ap,
                             eps_pp=self.eps_pp,
                             delta_pp=self.resolved_delta_pp(n), W=self.W,
                             rounds=self.rounds, max_depth=self.depth,
                             composition=self.composition,
                             pp_accounting=self.pp_accounting)

    def resolved_delta_pp(self, n: int) -> float:
        return 1.0 / n if self.delta_pp is None else self.delta_pp

    def hyperparameters(self) -> dict:
        return {"eta": self.eta, "lambda": self.lam, "gamma": self.gamma,
                "candidates": self.candidates, "rounds": self.rounds,
                "depth": self.depth, "W": self.W, "sigma1": self.sigma1}

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parses `key = value` lines; '#' starts a comment."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"config line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise SchemaError(f"config line {lineno}: unknown key {key!r}")
            try:
                kwargs[key] = _parse_value(key, value)
            except ValueError as err:
                raise SchemaError(f"config line {lineno}: {err}") from err
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "1/n"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_LISTS = {"eps_ap": _float_list, "seeds": _int_list, "methods": _str_list,
          "ap_columns": _str_list, "pp_columns": _str_list}
_INTS = {"n", "d_ap", "d_pp", "data_seed", "rounds", "depth", "candidates", "W",
         "releases_per_node", "mc_samples", "workers"}
_FLOATS = {"balance", "label_noise", "separation", "lam", "gamma", "eta",
           "delta_ap", "eps_pp", "sigma1", "test_fraction"}


def _parse_value(key: str, value: str):
    if key in _LISTS:
        return _LISTS[key](value)
    if key in _INTS:
        return int(float(value)) if "e" in value.lower() else int(value)
    if key in _FLOATS:
        return float(value)
    if key == "delta_pp":
        return None if value.replace(" ", "") == "1/n" else float(value)
    return value


def load_dataset(config: ExperimentConfig) -> tuple[Dataset, list[int], list[int]]:
    """The configured dataset and the column indices of each party."""
    if config.data == "synthetic":
        data = gen_synthetic(config.n, config.d_ap, config.d_pp, config.balance,
                             config.label_noise, config.data_seed,
                             config.separation)
    else:
        data = load_csv(config.data, config.label_column)
    names = list(data.feature_names)
    if config.ap_columns or config.pp_columns:
        missing = [c for c in (*config.ap_columns, *config.pp_columns)
                   if c not in names]
        if missing:
            raise SchemaError(f"unknown columns {missing}")
        ap = [names.index(c) for c in config.ap_columns]
        pp = [names.index(c) for c in config.pp_columns]
    elif config.data == "synthetic":
        ap = [j for j, c in enumerate(names) if c.startswith("ap")]
        pp = [j for j, c in enumerate(names) if c.startswith("pp")]
    else:
        half = max(1, data.d // 2)
        ap, pp = list(range(half)), list(range(half, data.d))
    if sorted(ap + pp) != list(range(data.d)):
        raise SchemaError("AP and PP columns must cover every feature")
    return data, ap, pp


def _run_seed(config: ExperimentConfig, seed: int) -> list[dict]:
    data, ap_cols, pp_cols = load_dataset(config)
    train_idx, test_idx = stratified_split(data.labels, config.test_fraction,
                                           seed)
    train, test = data.rows(train_idx), data.rows(test_idx)
    ap_train, pp_train = vertical_split(train, ap_cols, pp_cols)
    ap_test, pp_test = vertical_split(test, ap_cols, pp_cols)
    params = config.boost_params
    delta_pp = config.resolved_delta_pp(train.n)
    base = {"delta_ap": config.delta_ap, "eps_pp": config.eps_pp,
            "delta_pp": delta_pp, "seed": seed,
            "hyperparameters": config.hyperparameters()}
    records = []

    if "centralized" in config.methods:
        merged = Dataset(np.hstack([ap_train.features, pp_train]),
                         train.labels)
        start = time.perf_counter()
        model = train_centralized(merged, params)
        elapsed = time.perf_counter() - start
        score = auc(test.labels, predict(model, np.hstack([ap_test.features,
                                                           pp_test])))
        for eps in config.eps_ap:
            records.append({"method": "centralized", "eps_ap": eps, **base,
                            "auc": score,
                            "tree_time_s": elapsed / max(1, len(model.trees)),
                            "trees": len(model.trees), "status": model.status,
                            "budget": {"mode": "none"}})

    for eps in config.eps_ap:
        if "masked" in config.methods:
            start = time.perf_counter()
            try:
                privacy = calibrate(config.privacy_config(eps, train.n),
                                    train.n, config.sigma1,
                                    config.releases_per_node,
                                    config.mc_samples, seed)
            except CalibrationError as err:
                raise CalibrationError(
                    f"masked, eps_ap={eps}, seed={seed}: {err}") from err
            result = train_masked(ap_train, pp_train, params, privacy, seed)
            elapsed = time.perf_counter() - start
            model = result.model
            score = auc(test.labels, predict(model, ap_test.features, pp_test,
                                             result.pp_table))
            budget = dict(privacy.accountant)
            budget.update(units_used=result.units_used,
                          eps_query_ap=privacy.ap.eps,
                          delta_query_ap=privacy.ap.delta,
                          sigma1=privacy.sigma1, sigma2=privacy.sigma2)
            records.append({"method": "masked", "eps_ap": eps, **base,
                            "auc": score,
                            "tree_time_s": elapsed / max(1, len(model.trees)),
                            "trees": len(model.trees), "status": model.status,
                            "pp_nodes": _pp_share(model), "budget": budget})
        if "ldp-baseline" in config.methods:
            start = time.perf_counter()
            result = train_ldp_baseline(ap_train, pp_train, params, eps,
                                        config.delta_ap, seed,
                                        config.composition,
                                        config.releases_per_node)
            elapsed = time.perf_counter() - start
            model = result.model
            score = auc(test.labels, predict(model, ap_test.features, pp_test,
                                             result.pp_table))
            records.append({"method": "ldp-baseline", "eps_ap": eps, **base,
                            "auc": score,
                            "tree_time_s": elapsed / max(1, len(model.trees)),
                            "trees": len(model.trees), "status": model.status,
                            "pp_nodes": _pp_share(model),
                            "budget": {"mode": config.composition,
                                       "units_used": result.units_used}})
        logger.info("seed %d eps %.3g done", seed, eps)
    return records


def _pp_share(model) -> float:
    internal = [n for t in model.trees for n in t.nodes if not n.is_leaf]
    if not internal:
        return 0.0
    return sum(n.owner == "PP" for n in internal) / len(internal)


def run_experiment(config: ExperimentConfig) -> list[dict]:
    """Runs every (method, eps_ap, seed) combination.

    Records come back ordered by seed, then as produced. When `config.out` is
    set, results.jsonl and summary.csv are written there.
    """
    if config.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(config.workers) as pool:
            per_seed = list(pool.map(_run_seed, [config] * len(config.seeds),
                                     config.seeds))
    else:
        per_seed = [_run_seed(config, seed) for seed in config.seeds]
    records = [r for batch in per_seed for r in batch]
    if config.out:
        write_results(config.out, records)
    return records


def write_results(out_dir: str, records: Sequence[dict]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.jsonl"), "w",
              encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8",
              newline="") as fh:
        fh.write(summary_csv(records))


def read_results(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def aggregate(records: Sequence[dict]) -> list[dict]:
    """Mean and standard deviation of AUC and per-tree time per (method, eps)."""
    groups: dict[tuple[str, float], list[dict]] = {}
    for record in records:
        groups.setdefault((record["method"], float(record["eps_ap"])),
                          []).append(record)
    rows = []
    for (method, eps), items in sorted(
            groups.items(), key=lambda kv: (kv[0][1], _method_rank(kv[0][0]))):
        aucs = np.array([r["auc"] for r in items])
        times = np.array([r["tree_time_s"] for r in items])
        rows.append({"method": method, "eps_ap": eps, "seeds": len(items),
                     "auc_mean": float(aucs.mean()),
                     "auc_std": float(aucs.std(ddof=1)) if len(items) > 1
                     else 0.0,
                     "tree_time_s": float(times.mean())})
    return rows


def _method_rank(method: str) -> int:
    return METHODS.index(method) if method in METHODS else len(METHODS)


def summary_csv(records: Sequence[dict]) -> str:
    """Plot-ready table: one row per eps_ap, one column group per method."""
    rows = aggregate(records)
    methods = sorted({r["method"] for r in rows}, key=_method_rank)
    by_key = {(r["method"], r["eps_ap"]): r for r in rows}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["eps_ap"]
    for m in methods:
        header += [f"{m}_auc_mean", f"{m}_auc_std", f"{m}_tree_time_s"]
    writer.writerow(header)
    for eps in sorted({r["eps_ap"] for r in rows}):
        line = [repr(eps)]
        for m in methods:
            r = by_key.get((m, eps))
            line += ([repr(r["auc_mean"]), repr(r["auc_std"]),
                      repr(r["tree_time_s"])] if r else ["", "", ""])
        writer.writerow(line)
    return buf.getvalue()
