"""Command-line front end: ``flexopf solve | compare | validate``.

Exit codes: 0 when every penalized solve is rank one (or validation passes),
2 when a relaxation stays inexact or validation fails, 1 on errors.
Set ``FLEXOPF_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import conic
from .formulation import FormulationOptions, assemble
from .network import CaseError, NetworkCase, load_case, parse_flex_config, prepare_case, conventional_case
from .oracle import evaluate_acopf_point
from .recovery import RANK_THRESHOLD, OPFResult, SolverInconsistency, build_result, gap_bound
from .report import (FORMAT, case_digest, comparison_table, format_entries, parse_result_file, point_from_result,
                     result_entries, run_summary, tuning_table)
from .transform import augment, dump_augmented

logger = logging.getLogger("flexopf")

EXIT_OK, EXIT_ERROR, EXIT_INEXACT = 0, 1, 2
MISMATCH_TOL = 1e-5
LIMIT_TOL = 1e-6


class UsageError(Exception):
    pass


def _resolve(path: str, suffix: str) -> Path:
    """A file path, or the name of a bundled data file."""
    p = Path(path)
    if p.is_file():
        return p
    name = p.name if p.suffix else p.name + suffix
    bundled = resources.files("flexopf") / "data" / name
    if str(p) == p.name and bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"file not found: {path}")


@dataclass(frozen=True)
class RunManifest:
    case_path: Path
    config_path: Path
    mode: str = "flexible"  # flexible | conventional | both
    epsilon: float | None = None
    wq: float | None = None
    pmax_flow: tuple[float, ...] = ()  # MW
    scale_pgmax: float | None = None
    both_ends: bool = False
    dump_augmented: bool = False
    project_rank1: bool = False
    rank_threshold: float = RANK_THRESHOLD
    out_dir: Path = Path("flexopf-out")

    def __post_init__(self):
        if self.mode not in ("flexible", "conventional", "both"):
            raise UsageError(f"unknown mode {self.mode!r}")


def _load(man: RunManifest, pmax_flow: float | None = None):
    """Prepared case, epsilon and penalty weight for one flow limit."""
    raw = load_case(man.case_path)
    cfg = parse_flex_config(man.config_path.read_text(), raw)
    mods = cfg.modifications
    if pmax_flow is not None:
        mods = dataclasses.replace(mods, flow_limit=pmax_flow / raw.base_mva)
    if man.scale_pgmax is not None:
        mods = dataclasses.replace(mods, pmax_scale=man.scale_pgmax)
    cfg = dataclasses.replace(cfg, modifications=mods)
    eps = cfg.epsilon if man.epsilon is None else man.epsilon
    wq = cfg.wq if man.wq is None else man.wq
    return prepare_case(raw, cfg), eps, wq, cfg.q_penalty_scale


@dataclass
class ModeRun:
    mode: str
    case: NetworkCase  # network the results refer to
    relaxed: OPFResult
    penalized: OPFResult
    logs: dict


def _solve_mode(man: RunManifest, case: NetworkCase, eps: float, wq: float, q_scale, mode: str) -> ModeRun:
    aug = augment(case, eps)
    results, logs = {}, {}
    for run, weight in (("relaxed", 0.0), ("penalized", wq)):
        opts = FormulationOptions(wq=weight, conventional_mode=mode == "conventional",
                                  both_ends=man.both_ends, q_penalty_scale=q_scale)
        prog = assemble(aug, opts)
        logger.info("%s/%s: %d rows, %d scalars, matrix order %d", mode, run, len(prog.rows),
                    len(prog.variables), prog.size)
        sol = conic.solve(prog)
        logger.info("%s/%s: %s after %d iterations (%.1f s)", mode, run, sol.status, sol.iterations,
                    sol.wall_time)
        logs[run] = sol.log
        results[run] = build_result(prog, sol, threshold=man.rank_threshold,
                                    project_rank1=man.project_rank1, both_ends=man.both_ends)
        net_case = prog.network.case
    rel, pen = results["relaxed"], results["penalized"]
    if rel.solver_status == "optimal" and pen.solver_status == "optimal":
        bound = gap_bound(rel.cost, pen.cost)
        pen = dataclasses.replace(pen, gap_ratio_bound=bound)
    return ModeRun(mode, net_case, rel, pen, logs)


def _modes(man: RunManifest) -> list[str]:
    return ["flexible", "conventional"] if man.mode == "both" else [man.mode]


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    logger.debug("wrote %s", path)


def _exit_code(runs: list[ModeRun]) -> int:
    if any(r.penalized.solver_status != "optimal" or r.relaxed.solver_status != "optimal" for r in runs):
        return EXIT_ERROR
    return EXIT_OK if all(r.penalized.certified and r.penalized.rank.is_rank_one for r in runs) else EXIT_INEXACT


def _extra(man: RunManifest, pmax_flow) -> dict:
    return {"pmax_flow_mw": "config" if pmax_flow is None else repr(float(pmax_flow)),
            "scale_pgmax": "config" if man.scale_pgmax is None else repr(float(man.scale_pgmax)),
            "both_ends": str(man.both_ends).lower()}


def cmd_solve(man: RunManifest) -> int:
    pmax = man.pmax_flow[0] if man.pmax_flow else None
    if len(man.pmax_flow) > 1:
        raise UsageError("solve takes a single --pmax-flow value; use compare for several")
    case, eps, wq, q_scale = _load(man, pmax)
    man.out_dir.mkdir(parents=True, exist_ok=True)
    digest = case_digest(case, eps)
    if man.dump_augmented:
        _write(man.out_dir / "augmented.tsv", dump_augmented(augment(case, eps)))
    runs, report = [], [f"case {case.name}: {case.n_bus} buses, {len(case.flex_lines)} flexible lines, "
                        f"epsilon {eps:g}, wq {wq:g}\n"]
    for mode in _modes(man):
        run = _solve_mode(man, case, eps, wq, q_scale, mode)
        runs.append(run)
        for tag, res in (("relaxed", run.relaxed), ("penalized", run.penalized)):
            entries = result_entries(res, run.case, run=tag, mode=mode, digest=digest,
                                     extra=_extra(man, pmax))
            _write(man.out_dir / f"{mode}_{tag}.result", format_entries(entries))
            _write(man.out_dir / f"{mode}_{tag}.log", "\n".join(run.logs[tag]) + "\n")
            report.append(run_summary(f"{mode}/{tag}", res))
        if mode == "flexible" and case.flex_lines:
            text, dsv = tuning_table(case, run.penalized)
            report.append("\nOptimal tuning of flexible lines (penalized solve)\n" + text)
            _write(man.out_dir / "tuning.tsv", dsv)
    code = _exit_code(runs)
    report.append(f"\nexit status {code}\n")
    _write(man.out_dir / "report.txt", "".join(report))
    _write(man.out_dir / "run.result", format_entries([("format", FORMAT), ("exit_code", str(code)),
                                                       ("status", _STATUS_WORD[code])]))
    sys.stdout.write("".join(report))
    return code


_STATUS_WORD = {EXIT_OK: "exact", EXIT_INEXACT: "inexact", EXIT_ERROR: "error"}


def cmd_compare(man: RunManifest) -> int:
    if man.mode != "both":
        raise UsageError("compare needs --mode both")
    limits = list(man.pmax_flow) or [None]
    man.out_dir.mkdir(parents=True, exist_ok=True)
    flex_costs, conv_costs, shown, runs = [], [], [], []
    report = []
    for lim in limits:
        case, eps, wq, q_scale = _load(man, lim)
        if lim is None:
            lim = case.branches[0].P_flow_max * case.base_mva
        tag = f"{lim:g}MW"
        digest = case_digest(case, eps)
        for mode in ("flexible", "conventional"):
            run = _solve_mode(man, case, eps, wq, q_scale, mode)
            runs.append(run)
            for name, res in (("relaxed", run.relaxed), ("penalized", run.penalized)):
                entries = result_entries(res, run.case, run=name, mode=mode, digest=digest,
                                         extra=_extra(man, lim))
                _write(man.out_dir / f"{mode}_{name}_{tag}.result", format_entries(entries))
                report.append(run_summary(f"{mode}/{name} @ {tag}", res))
            (flex_costs if mode == "flexible" else conv_costs).append(run.penalized.cost)
        shown.append(lim)
    text, dsv = comparison_table(shown, flex_costs, conv_costs)
    report.append("\nGeneration cost with and without flexible lines (penalized solves)\n" + text)
    _write(man.out_dir / "comparison.tsv", dsv)
    code = _exit_code(runs)
    report.append(f"\nexit status {code}\n")
    _write(man.out_dir / "comparison.txt", "".join(report))
    _write(man.out_dir / "run.result", format_entries([("format", FORMAT), ("exit_code", str(code)),
                                                       ("status", _STATUS_WORD[code])]))
    sys.stdout.write("".join(report))
    return code


def cmd_validate(result_path: Path, man: RunManifest) -> int:
    data = parse_result_file(Path(result_path).read_text())

    def recorded(key, flag):
        if flag is not None:
            return flag
        v = data.get(key, "config")
        return None if v == "config" else float(v)

    pmax = recorded("pmax_flow_mw", man.pmax_flow[0] if man.pmax_flow else None)
    man = dataclasses.replace(man, scale_pgmax=recorded("scale_pgmax", man.scale_pgmax),
                              epsilon=float(data["epsilon"]) if man.epsilon is None else man.epsilon,
                              both_ends=man.both_ends or data.get("both_ends") == "true")
    case, eps, _, _ = _load(man, pmax)
    if case_digest(case, eps) != data.get("case_digest"):
        sys.stderr.write("refusing to validate: the case digest in the result file does not match "
                         "the given case and flex configuration\n")
        return EXIT_ERROR
    if data.get("mode") == "conventional":
        case = conventional_case(case)
    V, P, Q, k = point_from_result(data, case)
    aug = evaluate_acopf_point(case, V, P, Q, k, epsilon=eps, both_ends=man.both_ends)
    orig = evaluate_acopf_point(case, V, P, Q, k, epsilon=0.0, both_ends=man.both_ends)
    ok = aug.passes(MISMATCH_TOL, LIMIT_TOL)
    lines = []
    for tag, rep in (("augmented network (epsilon %g)" % eps, aug), ("original network", orig)):
        name, viol = rep.worst_constraint
        lines.append(f"{tag}: max mismatch {rep.max_mismatch:.3e} p.u. at bus {rep.worst_bus}, "
                     f"mean {rep.mean_mismatch:.3e}")
        lines.append(f"  worst constraint {name}: violation {viol:.3e}")
    tight = sorted(aug.slacks.items(), key=lambda kv: (kv[1], kv[0]))[:10]
    lines.append("tightest constraint slacks:")
    lines += [f"  {name:<32s} {s: .3e}" for name, s in tight]
    if ok:
        lines.append(f"PASS: power balance within {MISMATCH_TOL:g} p.u., limits within {LIMIT_TOL:g} p.u.")
    else:
        why = "power-balance mismatch" if aug.max_mismatch > MISMATCH_TOL else "limit violation"
        lines.append(f"FAIL: {why} (mismatch {aug.max_mismatch:.3e}, "
                     f"worst violation {aug.worst_constraint[1]:.3e})")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_INEXACT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexopf", description="AC OPF with flexible line impedances "
                                     "through a transformer-pair semidefinite relaxation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_default):
        p.add_argument("--case", default="case118", help="MATPOWER case file or bundled case name")
        p.add_argument("--flex-config", default="flex118", help="flex-line config file or bundled name")
        p.add_argument("--mode", default=mode_default, choices=["flexible", "conventional", "both"])
        p.add_argument("--epsilon", type=float, help="coupling conductance factor (config default)")
        p.add_argument("--wq", type=float, help="reactive penalty weight (config default)")
        p.add_argument("--pmax-flow", type=float, nargs="+", default=[], metavar="MW",
                       help="uniform branch flow limit in MW")
        p.add_argument("--scale-pgmax", type=float, help="scale every generator P_max")
        p.add_argument("--both-ends", action="store_true", help="limit flows at both branch ends")
        p.add_argument("--dump-augmented", action="store_true", help="write augmented.tsv")
        p.add_argument("--project-rank1", action="store_true",
                       help="report a rank-one projection of inexact solutions (not certified)")
        p.add_argument("--rank-threshold", type=float, default=RANK_THRESHOLD)
        p.add_argument("--out-dir", default="flexopf-out")

    common(sub.add_parser("solve", help="relaxed and penalized solves with recovery"), "flexible")
    common(sub.add_parser("compare", help="cost with and without flexible lines"), "both")
    p = sub.add_parser("validate", help="re-evaluate a result file against the AC equations")
    p.add_argument("result")
    common(p, "flexible")
    return parser


def _manifest(args) -> RunManifest:
    return RunManifest(
        case_path=_resolve(args.case, ".m"), config_path=_resolve(args.flex_config, ".cfg"),
        mode=args.mode, epsilon=args.epsilon, wq=args.wq, pmax_flow=tuple(args.pmax_flow),
        scale_pgmax=args.scale_pgmax, both_ends=args.both_ends, dump_augmented=args.dump_augmented,
        project_rank1=args.project_rank1, rank_threshold=args.rank_threshold, out_dir=Path(args.out_dir))


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FLEXOPF_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        man = _manifest(args)
        if args.command == "solve":
            return cmd_solve(man)
        if args.command == "compare":
            return cmd_compare(man)
        return cmd_validate(Path(args.result), man)
    except (UsageError, CaseError, ValueError, OSError, SolverInconsistency) as exc:
        sys.stderr.write(f"flexopf: error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
