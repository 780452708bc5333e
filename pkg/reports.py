"""Result files for search runs: traces, incumbents, exports and summaries.

Every file is written atomically so an interrupted run never leaves a
truncated CSV behind.
"""

import json
import math
import os
import tempfile
from pathlib import Path

import pandas as pd

from search_space import Chromosome, SearchSpace, symbolic, tag_to_str


TRACE_COLUMNS = [
    "generation", "best_fitness", "mean_fitness", "spdi", "tau", "mode",
    "p_cross", "p_mut", "true_evals_cum", "merged_count", "wallclock_ms",
]
ABLATION_COLUMNS = [
    "method", "mean_best", "std_best", "best_best", "true_evals_mean",
    "evals_to_target_mean", "optimum_hits", "delta_vs_full",
    "delta_best_vs_full", "delta_evals_to_target_vs_full",
]
BEST_ARCHITECTURE_COLUMNS = ["seed", "gene_name", "chosen_candidate", "best_fitness"]
EVOLUTION_COLUMNS = ["generation", "rank", "gene_name", "block", "candidate", "fitness"]


class ReportFormatError(ValueError):
    """A trace or export file that cannot be parsed."""


def _atomic_write(dest, content):
    """Write ``content`` to ``dest`` through a unique temporary file."""
    destination_dir = os.path.dirname(str(dest)) or "."
    os.makedirs(destination_dir, exist_ok=True)
    fd, temporary_path = tempfile.mkstemp(prefix=".macc-", suffix=".part", dir=destination_dir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(content)
        os.replace(temporary_path, dest)
    except Exception:
        try:
            os.unlink(temporary_path)
        except FileNotFoundError:
            pass
        raise
    return Path(dest)


def write_frame(dest, frame):
    return _atomic_write(dest, frame.to_csv(index=False, lineterminator="\n"))


def _write_json(dest, data):
    return _atomic_write(dest, json.dumps(data, indent=2, ensure_ascii=False) + "\n")


def trace_frame(trace):
    return pd.DataFrame([record.to_row() for record in trace], columns=TRACE_COLUMNS)


def write_trace(dest, trace):
    return write_frame(dest, trace_frame(trace))


def best_record(space: SearchSpace, chromosome: Chromosome, fitness, found_at):
    names = symbolic(space, chromosome)
    return {
        "alleles": list(chromosome.alleles),
        "genes": [
            {"name": gene.name, "block": tag_to_str(gene.block_tag), "candidate": names[gene.name]}
            for gene in space.genes
        ],
        "fitness": fitness,
        "found_at_true_evals": found_at,
    }


def write_best(dest, result):
    return _write_json(dest, best_record(result.space, result.best_chromosome, result.best_fitness, result.best_found_at))


def write_config_echo(dest, config):
    return _write_json(dest, config.model_dump(mode="json"))


def best_architectures_frame(results):
    """``results`` is an iterable of ``(seed, RunResult)``."""
    rows = []
    for seed, result in results:
        for gene_name, candidate in symbolic(result.space, result.best_chromosome).items():
            rows.append((seed, gene_name, candidate, result.best_fitness))
    return pd.DataFrame(rows, columns=BEST_ARCHITECTURE_COLUMNS)


def write_best_architectures(dest, results):
    return write_frame(dest, best_architectures_frame(results))


def evolution_frame(result):
    rows = []
    genes = result.space.genes
    for generation, rank, alleles, fitness in result.evolution:
        for gene, allele in zip(genes, alleles):
            rows.append((generation, rank, gene.name, tag_to_str(gene.block_tag), gene.candidates[allele], fitness))
    return pd.DataFrame(rows, columns=EVOLUTION_COLUMNS)


def write_evolution(dest, result):
    return write_frame(dest, evolution_frame(result))


def ablation_frame(ablation):
    return pd.DataFrame([vars(row) for row in ablation.rows], columns=ABLATION_COLUMNS)


def write_ablation(dest, ablation):
    return write_frame(dest, ablation_frame(ablation))


def read_trace(path):
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except (OSError, ValueError) as exc:
        raise ReportFormatError(f"cannot read trace {path}: {exc}") from exc
    if list(frame.columns) != TRACE_COLUMNS:
        raise ReportFormatError(f"{path}: header must be {','.join(TRACE_COLUMNS)}")
    numeric = [c for c in TRACE_COLUMNS if c != "mode"]
    converted = frame[numeric].apply(pd.to_numeric, errors="coerce")
    if converted.isna().any().any():
        raise ReportFormatError(f"{path}: non-numeric value in a numeric column")
    if frame.empty:
        raise ReportFormatError(f"{path}: trace has no generations")
    return frame


def summarize_trace(frame, optimum=None):
    best = frame["best_fitness"].astype(float)
    target = float(best.iloc[-1]) if optimum is None else float(optimum)
    hits = frame.loc[best >= target - 1e-12, "generation"]
    spdi = frame["spdi"].astype(float)
    modes = frame["mode"].astype(str)
    return {
        "generations": int(len(frame)),
        "final_best": float(best.iloc[-1]),
        "best_monotone": bool(best.is_monotonic_increasing),
        "first_hit_generation": int(hits.iloc[0]) if not hits.empty else None,
        "true_evals": int(frame["true_evals_cum"].iloc[-1]),
        "spdi_min": float(spdi.min()),
        "spdi_mean": float(spdi.mean()),
        "spdi_max": float(spdi.max()),
        "spdi_final": float(spdi.iloc[-1]),
        "explore_generations": int((modes == "explore").sum()),
        "mode_switches": int((modes != modes.shift()).iloc[1:].sum()),
    }


def format_summary(summary, title="Run summary"):
    lines = [f"=-=-=-=-=-{title}-=-=-=-=-="]
    for key, value in summary.items():
        if isinstance(value, float) and not math.isnan(value):
            value = f"{value:.6f}"
        lines.append(f"- {key}: {value}")
    return "\n".join(lines) + "\n"


def convergence_long(frame):
    """Long format (generation, metric, value) for convergence plots."""
    long = frame.melt(
        id_vars=["generation"],
        value_vars=["best_fitness", "mean_fitness", "spdi", "tau"],
        var_name="metric",
        value_name="value",
    )
    return long.sort_values(["generation", "metric"], kind="stable").reset_index(drop=True)


def parallel_coordinates(best_architectures):
    """One row per seed, one column per gene, plus the seed's best fitness."""
    wide = best_architectures.pivot(index="seed", columns="gene_name", values="chosen_candidate")
    order = list(dict.fromkeys(best_architectures["gene_name"]))
    wide = wide[order]
    fitness = best_architectures.groupby("seed")["best_fitness"].first()
    return wide.assign(best_fitness=fitness).reset_index()


def checkpoint_summary(data):
    """Generation index, population size and archive sizes of a checkpoint."""
    archives = {
        tag: len(snapshot["worker"]["archive"]) for tag, snapshot in sorted(data.get("snapshots", {}).items())
    }
    incumbent = data["incumbent"]
    return {
        "generation": int(data["generation"]),
        "population": len(data["population"]),
        "best_fitness": float(incumbent[1]),
        "true_evals": int(data["true_evals"]),
        **{f"archive_{tag}": size for tag, size in archives.items()},
    }
