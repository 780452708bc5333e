"""
Busca co-evolutiva cooperativa de arquiteturas multimodais.

Uso:
  python macc_search.py run configs/desk_benchmark.json [--seed 3] [--out-dir runs/x]
  python macc_search.py ablate configs/desk_benchmark.json --seeds 0..9
  python macc_search.py worker --connect 127.0.0.1:7640 --tag 1
  python macc_search.py inspect runs/x/trace.csv

Estrutura:
  macc_search.py → config.py → macc_engine.py → madts.py → gp_surrogate.py
                                     ↳ transport.py        ↳ genetic_ops.py, diversity.py
                 ↳ reports.py, s3_utils.py
"""

import argparse
import os
import sys
import time
from pathlib import Path

from config import ConfigError, build_evaluator, hello_payload, load_config, to_run_config
from evaluators import EvaluationError, SearchSpaceTooLargeError, TabularFormatError, bruteforce_optimum
from logging_utils import configure_logging
from macc_engine import CheckpointError, read_checkpoint, run_ablation_suite, run_search
from reports import (
    ReportFormatError,
    checkpoint_summary,
    convergence_long,
    format_summary,
    parallel_coordinates,
    read_trace,
    summarize_trace,
    write_ablation,
    write_best,
    write_best_architectures,
    write_config_echo,
    write_evolution,
    write_frame,
    write_trace,
)
from s3_utils import S3Uploader
from search_space import parse_tag
from transport import ProtocolError, WorkerFailure, coordinator_serve, spawn_workers, worker_connect

import pandas as pd

timestr = time.strftime("%Y-%m-%d_%H-%M-%S")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
ENUMERATION_CAP = 1_000_000
RUNTIME_ERRORS = (
    EvaluationError, WorkerFailure, CheckpointError, ReportFormatError,
    ProtocolError, TabularFormatError, OSError,
)


class UsageError(ValueError):
    pass


def parse_seeds(text):
    """``"0..9"`` (inclusivo) ou lista separada por vírgulas."""
    text = text.strip()
    try:
        if ".." in text:
            low, high = (int(part) for part in text.split("..", 1))
            if high < low:
                raise UsageError(f"intervalo de seeds vazio: {text!r}")
            return list(range(low, high + 1))
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"seeds inválidas: {text!r}") from exc


def _add_s3_arguments(parser):
    parser.add_argument("--s3-bucket", help="Bucket S3 de destino")
    parser.add_argument("--s3-prefix", default="", help="Prefixo das chaves S3")
    parser.add_argument("--s3-endpoint-url", help="Endpoint S3 compatível (ex.: MinIO)")


def _parse_args(argv=None):
    parser = argparse.ArgumentParser(description="Busca co-evolutiva cooperativa de arquiteturas")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Executa uma busca completa")
    run.add_argument("config", help="Arquivo JSON de configuração")
    run.add_argument("--seed", type=int, help="Sobrescreve run.seed")
    run.add_argument("--out-dir", help="Diretório de saída (padrão: runs/<data>)")
    run.add_argument("--resume", help="Continua a partir de um checkpoint.json")
    _add_s3_arguments(run)

    ablate = commands.add_parser("ablate", help="Executa o estudo de ablação")
    ablate.add_argument("config", help="Arquivo JSON de configuração")
    ablate.add_argument("--seeds", default="0..9", help="Seeds: '0..9' ou '1,2,5'")
    ablate.add_argument("--out-dir", help="Diretório de saída (padrão: runs/ablation_<data>)")
    _add_s3_arguments(ablate)

    worker = commands.add_parser("worker", help="Conecta um worker a um coordenador TCP")
    worker.add_argument("--connect", required=True, help="Endereço HOST:PORTA do coordenador")
    worker.add_argument("--tag", required=True, help="Bloco do worker: índice da modalidade ou 'fusion'")
    worker.add_argument("--attempts", type=int, default=3, help="Tentativas de conexão")
    worker.add_argument("--idle-timeout", type=float, default=120.0, help="Segundos sem tráfego antes de sair")

    inspect = commands.add_parser("inspect", help="Resume um trace.csv ou checkpoint.json")
    inspect.add_argument("path", help="trace.csv ou checkpoint.json")
    inspect.add_argument("--out-dir", help="Onde gravar os CSVs para gráficos (padrão: junto ao trace)")
    inspect.add_argument("--optimum", type=float, help="Ótimo de referência para a geração do primeiro acerto")
    return parser.parse_args(argv)


def _uploader(args):
    if not args.s3_bucket:
        return None
    return S3Uploader(args.s3_bucket, args.s3_prefix, args.s3_endpoint_url)


def _upload(args, out_dir):
    uploader = _uploader(args)
    if uploader is None:
        return
    uploaded, failed = uploader.upload_directory(out_dir)
    print(f"S3: {uploaded} arquivo(s) enviados, {failed} falha(s)")


def _print_generation(record):
    print(
        f"  geração {record.generation:>3}: melhor {record.best_fitness:.6f}  "
        f"média {record.mean_fitness:.6f}  spdi {record.spdi_value:.4f} ({record.mode.value})  "
        f"avaliações {record.true_evals_cumulative}"
    )


def cmd_run(args, logger):
    config = load_config(args.config)
    space = config.space.build()
    run = to_run_config(config, args.seed)
    out_dir = Path(args.out_dir or os.path.join("runs", timestr))
    checkpoint_path = out_dir / "checkpoint.json" if run.checkpoint_every or args.resume else None
    evaluator = build_evaluator(config.evaluator, space)
    pool = None
    try:
        if config.transport.mode == "tcp" and not run.ablation.disable_macc:
            pool = coordinator_serve(
                config.transport.bind, space, hello_payload(config, space, run),
                reply_timeout=config.transport.reply_timeout,
            )
            if config.transport.spawn_workers:
                pool.attach_children(spawn_workers(pool.address, space))
            print(f"Aguardando {len(space.block_tags)} workers em {pool.address} ...")
            pool.wait_for_workers()
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info("Run started", extra={"event": "cli_run", "file_path": str(out_dir), "seed": run.master_seed})
        print(f"Busca: K={space.size_k}, M={space.modality_count}, N={run.population_size}, T={run.generations}")
        result = run_search(
            run, space, evaluator, pool,
            checkpoint_path=checkpoint_path, resume_from=args.resume, on_generation=_print_generation,
        )
    finally:
        if pool is not None:
            pool.close()
        evaluator.close()
    write_trace(out_dir / "trace.csv", result.trace)
    write_best(out_dir / "best.json", result)
    write_config_echo(out_dir / "config.json", config)
    write_evolution(out_dir / "evolution.csv", result)
    write_best_architectures(out_dir / "best_architectures.csv", [(result.config.master_seed, result)])
    print(f"\nMelhor aptidão: {result.best_fitness:.6f} após {result.true_evals} avaliações reais")
    print(f"Resultados em {out_dir}")
    _upload(args, out_dir)
    return EXIT_OK


def _reference_optimum(config, space, evaluator):
    if config.evaluator.kind == "external":
        return None
    try:
        _, value = bruteforce_optimum(space, evaluator, ENUMERATION_CAP)
    except SearchSpaceTooLargeError:
        return None
    return value


def cmd_ablate(args, logger):
    config = load_config(args.config)
    seeds = parse_seeds(args.seeds)
    if len(seeds) < 2:
        raise UsageError("a ablação precisa de pelo menos duas seeds")
    space = config.space.build()
    run = to_run_config(config)
    out_dir = Path(args.out_dir or os.path.join("runs", f"ablation_{timestr}"))
    evaluator = build_evaluator(config.evaluator, space)
    try:
        optimum = _reference_optimum(config, space, evaluator)
        print(f"Ablação: 4 variantes x {len(seeds)} seeds ({4 * len(seeds)} execuções)")
        ablation = run_ablation_suite(run, space, evaluator, seeds, optimum)
    finally:
        evaluator.close()
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = write_ablation(out_dir / "ablation.csv", ablation)
    full_runs = ablation.runs[ablation.rows[0].method]
    write_best_architectures(out_dir / "best_architectures.csv", list(zip(seeds, full_runs)))
    write_config_echo(out_dir / "config.json", config)
    logger.info("Ablation finished", extra={"event": "cli_ablate", "file_path": str(frame)})
    print(pd.read_csv(frame).to_string(index=False))
    _upload(args, out_dir)
    return EXIT_OK


def cmd_worker(args, logger):
    try:
        tag = parse_tag(args.tag)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return worker_connect(args.connect, tag, build_evaluator, attempts=args.attempts, idle_timeout=args.idle_timeout)


def cmd_inspect(args, logger):
    path = Path(args.path)
    if path.suffix == ".json":
        summary = checkpoint_summary(read_checkpoint(path))
        print(format_summary(summary, "Checkpoint"))
        return EXIT_OK
    frame = read_trace(path)
    print(format_summary(summarize_trace(frame, args.optimum)))
    out_dir = Path(args.out_dir) if args.out_dir else path.parent
    write_frame(out_dir / "convergence_long.csv", convergence_long(frame))
    best_architectures = path.parent / "best_architectures.csv"
    if best_architectures.exists():
        write_frame(out_dir / "parallel_coordinates.csv", parallel_coordinates(pd.read_csv(best_architectures)))
    print(f"CSVs para gráficos em {out_dir}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "worker": cmd_worker, "inspect": cmd_inspect}


def main(argv=None):
    args = _parse_args(argv)
    logger = configure_logging()
    try:
        return COMMANDS[args.command](args, logger)
    except (ConfigError, UsageError) as exc:
        print(f"ERRO: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        logger.error(f"{args.command} failed: {exc}", exc_info=True, extra={"event": "cli_failed"})
        print(f"ERRO: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyError as exc:
        logger.error(f"{args.command} failed: {exc}", exc_info=True, extra={"event": "cli_failed"})
        print(f"ERRO: campo ausente {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
