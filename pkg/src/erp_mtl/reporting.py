"""Summary tables, paired comparisons, correlations and MSE curves from a results directory.

Every emitted table is tab-separated and starts with a ``#`` line carrying
the format version, config hash and master seed. Rows are sorted, so
rerunning the report over the same run directories reproduces the files
byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import DataError, fit_standardization, apply_standardization, transformed_values
from .experiment import (
    ExperimentConfig,
    METRICS_COLUMNS,
    fmt_float,
    header_line,
    load_dataset,
    parse_metrics,
    read_manifest,
)
from .signals import ALL_SIGNALS, ERP_SIGNALS, EYE_SIGNALS, canonical_order
from .stats import (
    DEFAULT_Q,
    DegenerateSampleError,
    PairedSample,
    bhy_adjust,
    correlation_matrix,
    one_sample_ttest,
    paired_ttest,
)


class ReportError(Exception):
    pass


class EmptyResultsError(ReportError):
    pass


class ConfigMismatchError(ReportError):
    pass


@dataclass
class RunRecord:
    variation: str
    signals: tuple[str, ...]
    run_index: int
    config_hash: str
    master_seed: int
    split_hash: str
    final_mse: dict[str, float]
    final_pove: dict[str, float]
    metrics: list[tuple[int, str, str, float]] = field(default_factory=list, repr=False)


@dataclass
class ResultSet:
    root: Path
    config_hash: str
    master_seed: int
    records: list[RunRecord]

    def variations(self) -> list[str]:
        return sorted({r.variation for r in self.records}, key=_variation_sort_key)

    def by_variation(self, key: str) -> dict[int, RunRecord]:
        return {r.run_index: r for r in self.records if r.variation == key}

    def signals(self) -> tuple[str, ...]:
        return canonical_order({s for r in self.records for s in r.signals})

    def header(self, kind: str) -> str:
        return header_line(kind, self.config_hash, self.master_seed)


def _variation_sort_key(key: str):
    names = key.split("+")
    return (len(names), [ALL_SIGNALS.index(n) if n in ALL_SIGNALS else 99 for n in names])


def _to_float(v) -> float:
    return float(v) if not isinstance(v, str) else float(v)


def load_results(root: str | Path, require_hash: bool | None = True) -> ResultSet:
    """Read every completed run under ``root``.

    Runs must agree on the config hash; a directory mixing configs is
    refused with the offending hashes listed. ``require_hash=None`` skips
    the comparison against ``experiment.json`` (used while a sweep is
    still being planned).
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"results directory not found: {root}")
    records: list[RunRecord] = []
    hashes: dict[str, list[str]] = {}
    for manifest_path in sorted(root.glob("*/run-*/manifest.json")):
        d = manifest_path.parent
        m = read_manifest(d)
        if m is None:
            continue
        metrics_file = d / "metrics.tsv"
        metrics = parse_metrics(metrics_file.read_text(encoding="utf-8")) if metrics_file.exists() else []
        rec = RunRecord(
            variation=m["variation"],
            signals=tuple(m["signals"]),
            run_index=int(m["run_index"]),
            config_hash=m["config_hash"],
            master_seed=int(m["master_seed"]),
            split_hash=m["split_hash"],
            final_mse={k: _to_float(v) for k, v in m["final_mse"].items()},
            final_pove={k: _to_float(v) for k, v in m["final_pove"].items()},
            metrics=metrics,
        )
        records.append(rec)
        hashes.setdefault(rec.config_hash, []).append(str(d.relative_to(root)))
    if not records:
        raise EmptyResultsError(f"no completed runs under {root}")
    if len(hashes) > 1:
        detail = "; ".join(f"{h}: {len(v)} run(s), e.g. {v[0]}" for h, v in sorted(hashes.items()))
        raise ConfigMismatchError(f"runs under {root} come from different configs ({detail})")
    (config_hash,) = hashes
    exp = root / "experiment.json"
    if require_hash and exp.exists():
        recorded = json.loads(exp.read_text(encoding="utf-8")).get("config_hash")
        if recorded != config_hash:
            raise ConfigMismatchError(f"experiment.json records config {recorded} but runs carry {config_hash}")
    seeds = {r.master_seed for r in records}
    if len(seeds) > 1:
        raise ConfigMismatchError(f"runs under {root} use different master seeds: {sorted(seeds)}")
    records.sort(key=lambda r: (_variation_sort_key(r.variation), r.run_index))
    return ResultSet(root, config_hash, seeds.pop(), records)


# ---- tables ----------------------------------------------------------------------

def _write_table(path: Path, header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    lines = [header, "\t".join(columns)]
    for row in rows:
        lines.append("\t".join(fmt_float(c) if isinstance(c, float) else str(c) for c in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _safe_one_sample(values: Sequence[float]):
    try:
        r = one_sample_ttest(values)
        return r.t, r.p
    except DegenerateSampleError:
        return float("nan"), float("nan")


def _safe_paired(a: Sequence[float], b: Sequence[float]):
    """(mean difference, t, p, exact flag); identical samples give p = 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float((a - b).mean()) if a.size else float("nan")
    try:
        r = paired_ttest(PairedSample(a, b))
        return diff, r.t, r.p, r.exact or ""
    except DegenerateSampleError:
        if a.size >= 2 and np.array_equal(a, b):
            return diff, 0.0, 1.0, "identical"
        return diff, float("nan"), float("nan"), ""


def _adjust(pvalues: Sequence[float], q: float) -> list[bool]:
    """BHY over the finite p-values of one family; NaN entries are never rejected."""
    p = np.asarray(pvalues, dtype=np.float64)
    ok = np.isfinite(p)
    out = np.zeros(p.size, dtype=bool)
    if ok.any():
        out[ok] = bhy_adjust(p[ok], q)
    return out.tolist()


def _mark(flag: bool) -> str:
    return "*" if flag else ""


def pove_rows(results: ResultSet, q: float = DEFAULT_Q) -> list[list]:
    rows = []
    for key in results.variations():
        runs = results.by_variation(key)
        for s in canonical_order(key.split("+")):
            vals = [runs[i].final_pove[s] for i in sorted(runs)]
            arr = np.asarray(vals)
            t, p = _safe_one_sample(vals)
            sd = float(arr.std(ddof=1)) if arr.size > 1 else float("nan")
            rows.append([key, s, len(vals), float(arr.mean()), sd, t, p])
    flags = _adjust([r[-1] for r in rows], q)
    return [r + [_mark(f)] for r, f in zip(rows, flags)]


POVE_COLUMNS = ("variation", "signal", "runs", "mean_pove", "sd_pove", "t", "p", "bhy")


def _paired_values(results: ResultSet, a: str, b: str, signal: str, field_: str = "final_pove"):
    ra, rb = results.by_variation(a), results.by_variation(b)
    common = sorted(set(ra) & set(rb))
    mismatched = [i for i in common if ra[i].split_hash != rb[i].split_hash]
    if mismatched:
        raise ReportError(f"{a} and {b} used different splits for runs {mismatched[:5]}")
    va = [getattr(ra[i], field_)[signal] for i in common]
    vb = [getattr(rb[i], field_)[signal] for i in common]
    return va, vb


def comparison_rows(results: ResultSet, q: float = DEFAULT_Q) -> list[list]:
    """Every multi-signal variation against the target trained alone, per target."""
    rows = []
    keys = results.variations()
    present = set(keys)
    for s in results.signals():
        if s not in present:
            continue
        for key in keys:
            if key == s or s not in key.split("+"):
                continue
            va, vb = _paired_values(results, key, s, s)
            if not va:
                continue
            diff, t, p, exact = _safe_paired(va, vb)
            rows.append([s, key, len(va), float(np.mean(va)), float(np.mean(vb)), diff, t, p, exact])
    flags = _adjust([r[7] for r in rows], q)
    return [r + [_mark(f)] for r, f in zip(rows, flags)]


COMPARISON_COLUMNS = ("target", "variation", "runs", "pove_variation", "pove_alone", "difference", "t", "p",
                      "exact", "bhy")


def best_combinations(results: ResultSet, signals: Sequence[str] = ERP_SIGNALS) -> dict[str, tuple[str, ...]]:
    """Per target, the ERP-only variation with the highest mean POVE on that target."""
    best = {}
    for target in signals:
        scored = []
        for key in results.variations():
            names = key.split("+")
            if target not in names or any(n not in ERP_SIGNALS for n in names):
                continue
            runs = results.by_variation(key)
            scored.append((float(np.mean([r.final_pove[target] for r in runs.values()])), key))
        if scored:
            # highest mean; ties resolved towards fewer signals, then registry order
            top = max(scored, key=lambda x: (x[0], [-v for v in _flatten_key(x[1])]))
            best[target] = tuple(top[1].split("+"))
    return best


def _flatten_key(key: str) -> list[int]:
    n, order = _variation_sort_key(key)
    return [n] + order


def table1_rows(results: ResultSet, q: float = DEFAULT_Q) -> list[list]:
    """Rows of table1.tsv: per ERP target, the best combination and its near-equals.

    A combination is listed when its target POVE is significantly different
    from the target trained alone, not significantly different from the
    best combination, and no larger than it. Both families of tests in the
    table share one BHY adjustment.
    """
    best = best_combinations(results)
    tests: list[tuple[str, str, str, float]] = []  # (target, key, kind, p)
    candidates: dict[tuple[str, str], dict] = {}
    for target, combo in best.items():
        best_key = "+".join(combo)
        alone = target
        if alone not in set(results.variations()):
            continue
        for key in results.variations():
            names = key.split("+")
            if target not in names or any(n not in ERP_SIGNALS for n in names) or key == alone:
                continue
            va, vb = _paired_values(results, key, alone, target)
            _, _, p_alone, _ = _safe_paired(va, vb)
            info = {"mean": float(np.mean(va)), "mean_alone": float(np.mean(vb))}
            tests.append((target, key, "alone", p_alone))
            if key != best_key:
                vk, vbest = _paired_values(results, key, best_key, target)
                _, _, p_best, _ = _safe_paired(vk, vbest)
                tests.append((target, key, "best", p_best))
            candidates[(target, key)] = info
    flags = _adjust([t[3] for t in tests], q)
    decided = {(t[0], t[1], t[2]): f for t, f in zip(tests, flags)}
    rows = []
    for target, combo in best.items():
        best_key = "+".join(combo)
        if (target, best_key) not in candidates and best_key != target:
            continue
        best_mean = candidates.get((target, best_key), {}).get("mean")
        alone_runs = results.by_variation(target)
        alone_mean = float(np.mean([r.final_pove[target] for r in alone_runs.values()])) if alone_runs else float("nan")
        if best_mean is None:
            best_mean = alone_mean
        entries = []
        for (t, key), info in candidates.items():
            if t != target:
                continue
            diff_alone = decided.get((target, key, "alone"), False)
            if key == best_key:
                entries.append((key, info["mean"], diff_alone, True))
                continue
            diff_best = decided.get((target, key, "best"), False)
            if diff_alone and not diff_best and info["mean"] <= best_mean:
                entries.append((key, info["mean"], diff_alone, False))
        if best_key == target:
            entries.append((target, alone_mean, False, True))
        entries.sort(key=lambda e: (-e[1], _variation_sort_key(e[0])))
        for key, mean, sig_alone, is_best in entries:
            extra = "+".join(n for n in key.split("+") if n != target) or "-"
            rows.append([target, extra, alone_mean, mean, _mark(sig_alone), "best" if is_best else ""])
    return rows


TABLE1_COLUMNS = ("target", "additional_signals", "pove_alone", "pove", "differs_from_alone", "best")


def table2_rows(results: ResultSet, q: float = DEFAULT_Q) -> list[list]:
    """Rows of table2.tsv: behavioral augmentations of each ERP target."""
    keys = set(results.variations())
    rows = []
    tests = []
    eye = set(EYE_SIGNALS)
    for target in ERP_SIGNALS:
        if target not in keys:
            continue
        for key in sorted(keys, key=_variation_sort_key):
            names = set(key.split("+"))
            if target not in names or key == target:
                continue
            extra = names - {target}
            behavioral = extra & (eye | {"READ"})
            if not behavioral:
                continue
            label_parts = []
            erp_extra = canonical_order(extra & set(ERP_SIGNALS))
            if erp_extra:
                label_parts.append("+".join(erp_extra))
            if "READ" in extra:
                label_parts.append("READ")
            if eye <= extra:
                label_parts.append("EYE")
            elif extra & eye:
                label_parts.append("+".join(canonical_order(extra & eye)))
            va, vb = _paired_values(results, key, target, target)
            diff, t, p, _ = _safe_paired(va, vb)
            tests.append(p)
            rows.append([target, "+".join(label_parts), float(np.mean(vb)), float(np.mean(va)), diff, t, p])
    flags = _adjust(tests, q)
    return [r + [_mark(f)] for r, f in zip(rows, flags)]


TABLE2_COLUMNS = ("target", "additional", "pove_alone", "pove", "difference", "t", "p", "bhy")


def correlation_rows(config: ExperimentConfig) -> list[list]:
    """Raw Pearson r between signals on content words, after standardization and participant averaging."""
    ds, _ = load_dataset(config)
    if not ds.sentences:
        raise DataError("dataset is empty")
    content = ds.content_mask()
    values = transformed_values(ds)
    stats = fit_standardization(values, content, list(ds.signals))
    series = apply_standardization(values, stats)[content]
    names = list(ds.signals)
    mat = correlation_matrix(series, names)
    return [[a] + [mat[(a, b)] for b in names] for a in names]


# ---- curves --------------------------------------------------------------------------

CURVE_KINDS = ("independent", "joint", "difference")


def joint_variation_for(results: ResultSet, signal: str) -> str | None:
    """The widest variation containing ``signal`` (the 'all signals together' model)."""
    options = [k for k in results.variations() if signal in k.split("+") and k != signal]
    if not options:
        return None
    return max(options, key=lambda k: (len(k.split("+")), [-x for x in _variation_sort_key(k)[1]]))


def curve_series(results: ResultSet, signal: str, split: str = "validation") -> dict[str, np.ndarray] | None:
    """Mean per-epoch MSE of ``signal`` trained alone, jointly, and joint minus alone."""
    joint = joint_variation_for(results, signal)
    if joint is None or signal not in set(results.variations()):
        return None
    ra, rj = results.by_variation(signal), results.by_variation(joint)
    common = sorted(set(ra) & set(rj))
    if not common:
        return None

    def curve(rec: RunRecord) -> np.ndarray:
        rows = sorted((e, v) for e, s, sp, v in rec.metrics if s == signal and sp == split)
        return np.array([v for _, v in rows])

    ind = np.array([curve(ra[i]) for i in common])
    jnt = np.array([curve(rj[i]) for i in common])
    if ind.shape != jnt.shape:
        raise ReportError(f"{signal}: independent and joint runs recorded different epoch counts")
    return {
        "independent": ind.mean(axis=0),
        "joint": jnt.mean(axis=0),
        "difference": (jnt - ind).mean(axis=0),
        "joint_variation": joint,
        "runs": len(common),
    }


def write_curves(results: ResultSet, out_dir: Path, split: str = "validation") -> dict[str, list[Path]]:
    out: dict[str, list[Path]] = {}
    for s in results.signals():
        series = curve_series(results, s, split)
        if series is None:
            continue
        paths = []
        for kind in CURVE_KINDS:
            header = header_line(
                f"curve {kind}", results.config_hash, results.master_seed,
                joint=series["joint_variation"], runs=series["runs"],
            )
            rows = [[e, s, split, float(v)] for e, v in enumerate(series[kind])]
            paths.append(_write_table(out_dir / f"{s}_{kind}.tsv", header, METRICS_COLUMNS, rows))
        out[s] = paths
    return out


# ---- entry point -----------------------------------------------------------------------

@dataclass
class ReportOutput:
    files: list[Path]
    curves: dict[str, list[Path]]
    figures: list[Path]


def write_report(
    results_dir: str | Path,
    out_dir: str | Path | None = None,
    q: float = DEFAULT_Q,
    figures: bool = True,
    config: ExperimentConfig | None = None,
) -> ReportOutput:
    results = load_results(results_dir)
    out = Path(out_dir) if out_dir is not None else Path(results_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    files = [
        _write_table(out / "pove_summary.tsv", results.header("pove-summary"), POVE_COLUMNS, pove_rows(results, q)),
    ]
    comps = comparison_rows(results, q)
    if comps:
        files.append(_write_table(out / "paired_comparisons.tsv", results.header("paired-comparisons"),
                                  COMPARISON_COLUMNS, comps))
    t1 = table1_rows(results, q)
    if t1:
        files.append(_write_table(out / "table1.tsv", results.header("table1"), TABLE1_COLUMNS, t1))
    t2 = table2_rows(results, q)
    if t2:
        files.append(_write_table(out / "table2.tsv", results.header("table2"), TABLE2_COLUMNS, t2))

    if config is None:
        exp = Path(results_dir) / "experiment.json"
        if exp.exists():
            raw = json.loads(exp.read_text(encoding="utf-8"))["config"]
            raw.pop("inputs", None)
            config = ExperimentConfig.from_dict(raw)
    if config is not None:
        try:
            corr = correlation_rows(config)
        except (FileNotFoundError, DataError):
            corr = None
        if corr:
            names = [r[0] for r in corr]
            files.append(_write_table(out / "correlations.tsv", results.header("correlations"),
                                      ["signal"] + names, corr))

    curves = write_curves(results, out / "curves")
    figs: list[Path] = []
    if figures:
        from .plotting import plot_curves, plot_pove

        figs.append(plot_pove(results, out / "figures" / "pove.png"))
        for s in curves:
            series = curve_series(results, s)
            figs.append(plot_curves(s, series, out / "figures" / f"{s}_curves.png"))
    return ReportOutput(files, curves, figs)
