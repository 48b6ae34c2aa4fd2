"""Command-line entry point: ``hiermpc certify|negotiate|simulate``.

Exit codes: 0 success/stable, 1 invalid configuration or usage,
2 diverged closed loop, 3 negotiation failure, 4 no convergent beta.
"""
from __future__ import annotations

import argparse
import csv
import json
import multiprocessing as mp
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .coordinator import Coordinator, SubsystemInterface, certify_convergence, fixed_point_solve
from .errors import HandoverError, HierMpcError, NoConvergentBeta
from .local import SubsystemController
from .simulator import VERDICT_CODES, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = VERDICT_CODES["diverged"]
EXIT_NEGOTIATION = VERDICT_CODES["negotiation_failure"]
EXIT_NO_CONVERGENT_BETA = 4


class _Parser(argparse.ArgumentParser):
    # usage errors share the invalid-configuration code; 2 means "diverged"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiermpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        group = p.add_mutually_exclusive_group()
        group.add_argument("--beta", type=float, help="filter coefficient in (0, 1]")
        group.add_argument("--beta-sweep", action="store_true",
                           help="use the certification grid (recommended beta)")
        p.add_argument("--mode", choices=["hierarchical", "decentralized"])
        p.add_argument("--transport", help="inproc or wire:<host>:<port>")

    common(sub.add_parser("certify", help="spectral radius of Z(beta) over a beta grid"))
    p = sub.add_parser("negotiate", help="fixed-point negotiations from random initial profiles")
    common(p)
    p.add_argument("--count", type=int, help="number of negotiations")
    p = sub.add_parser("simulate", help="closed-loop scenario run")
    common(p)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    update = {}
    if args.out is not None:
        update["out"] = args.out
    if args.seed is not None:
        update["seed"] = args.seed
    if args.transport is not None:
        update["transport"] = args.transport
    coord = {}
    if args.beta is not None:
        coord["beta"] = args.beta
    elif args.beta_sweep:
        coord["beta"] = None
    if getattr(args, "count", None) is not None:
        update["negotiate"] = cfg.negotiate.model_copy(update={"count": args.count}).model_dump()
    if coord:
        update["coordinator"] = cfg.coordinator.model_copy(update=coord).model_dump()
    # re-validate so overrides obey the same schema as the file
    return RunConfig.model_validate({**cfg.model_dump(), **update})


# --------------------------------------------------------------------------
# subsystem handles


def _serve_in_process(index, model, local_cfg, central_cfg, host, port, queue):
    from .wire import SubsystemServer

    controller = SubsystemController(model, local_cfg, central_cfg, name=f"S{index + 1}")
    with SubsystemServer(controller, (host, port)) as server:
        queue.put((index, server.address))
        server.serve_forever()


@contextmanager
def subsystem_handles(cfg: RunConfig, plant, setup):
    """In-process controllers, or controllers in two server processes for ``wire:``."""
    if cfg.transport == "inproc":
        yield [SubsystemController(m, lc, cc, name=f"S{i + 1}")
               for i, (m, lc, cc) in enumerate(zip(plant.subsystems, setup.local, setup.central))]
        return
    from .wire import RemoteSubsystem, parse_address

    host, port = parse_address(cfg.transport[len("wire:"):])
    queue = mp.Queue()
    procs = []
    for i, (m, lc, cc) in enumerate(zip(plant.subsystems, setup.local, setup.central)):
        proc = mp.Process(target=_serve_in_process,
                          args=(i, m, lc, cc, host, port + i if port else 0, queue), daemon=True)
        proc.start()
        procs.append(proc)
    addresses = dict(queue.get(timeout=120) for _ in procs)
    remotes = [RemoteSubsystem(addresses[i]) for i in range(len(procs))]
    try:
        yield remotes
    finally:
        for r in remotes:
            try:
                r.shutdown()
            except OSError:
                pass
        for proc in procs:
            proc.join(timeout=5)
            if proc.is_alive():
                proc.terminate()


# --------------------------------------------------------------------------
# commands


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_certify(cfg: RunConfig, args) -> int:
    plant = cfg.build_plant()
    setup = cfg.control_setup(plant)
    with subsystem_handles(cfg, plant, setup) as handles:
        Mv = [h.coupling_sensitivity() for h in handles]
    betas = [cfg.coordinator.beta] if cfg.coordinator.beta is not None else cfg.beta_grid()
    report = certify_convergence(Mv[0], Mv[1], betas)
    out = _out_dir(cfg)
    with open(out / "certify.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "rho"])
        for b, rho in zip(report.betas, report.rhos):
            writer.writerow([f"{b:g}", repr(rho)])
    (out / "certify.json").write_text(json.dumps({
        "recommended_beta": report.recommended_beta,
        "certified": report.certified,
        "min_rho": min((r for b, r in zip(report.betas, report.rhos) if b > 0), default=None),
    }, indent=2))
    if not report.certified:
        print("NO_CONVERGENT_BETA: no beta on the grid gives rho(Z(beta)) < 1", file=sys.stderr)
        return EXIT_NO_CONVERGENT_BETA
    print(f"recommended beta {report.recommended_beta:g} "
          f"(rho {report.rho_at(report.recommended_beta):.6g}); wrote {out / 'certify.csv'}")
    return EXIT_OK


def _resolve_beta(cfg: RunConfig, handles) -> float:
    if cfg.coordinator.beta is not None:
        return cfg.coordinator.beta
    report = certify_convergence(handles[0].coupling_sensitivity(),
                                 handles[1].coupling_sensitivity(), cfg.beta_grid())
    if not report.certified:
        raise NoConvergentBeta("no beta on the grid gives rho(Z(beta)) < 1")
    return report.recommended_beta


def cmd_negotiate(cfg: RunConfig, args) -> int:
    plant = cfg.build_plant()
    setup = cfg.control_setup(plant)
    settings = cfg.negotiate
    out = _out_dir(cfg)
    with subsystem_handles(cfg, plant, setup) as handles:
        beta = _resolve_beta(cfg, handles)
        coord_cfg = cfg.coordinator_config(beta)
        for h, m in zip(handles, plant.subsystems):
            h.measure(np.zeros(m.n_x), 0)
        coordinator = Coordinator(handles, coord_cfg, cfg.targets(plant))
        r = coordinator.center() if settings.r is None else np.asarray(settings.r, dtype=float)
        interfaces = [SubsystemInterface.of(h) for h in handles]
        rng = np.random.default_rng(cfg.seed)
        trace_rows, summary_rows = [], []
        for run in range(settings.count):
            v0 = tuple(settings.init_scale * rng.standard_normal((it.N, it.n_v_core))
                       for it in interfaces)
            outcome = fixed_point_solve(handles, r, v0, coord_cfg, interfaces,
                                        r_d=coordinator.r_d)
            trace_rows.extend([run, s + 1, repr(e)] for s, e in enumerate(outcome.error_trace))
            hit = next((s + 1 for s, e in enumerate(outcome.error_trace) if e < coord_cfg.tol), "")
            summary_rows.append([run, outcome.iterations, int(outcome.converged), outcome.status,
                                 repr(outcome.final_error), hit])
    with open(out / "negotiate_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "sigma", "max_error"])
        writer.writerows(trace_rows)
    with open(out / "negotiate_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "iterations", "converged", "status", "final_error",
                         "iterations_to_tol"])
        writer.writerows(summary_rows)
    failed = [row[0] for row in summary_rows if not row[2]]
    print(f"beta {beta:g}: {settings.count - len(failed)}/{settings.count} negotiations converged")
    return EXIT_NEGOTIATION if failed else EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    plant = cfg.build_plant()
    scenario = cfg.load_scenario()
    if args.mode is not None:
        scenario = scenario.model_copy(update={"mode": args.mode})
    setup = cfg.control_setup(plant)
    out = _out_dir(cfg)
    if cfg.transport == "inproc":
        log = run_scenario(scenario, plant, setup)
    else:
        with subsystem_handles(cfg, plant, setup) as handles:
            log = run_scenario(scenario, plant, setup, handlers=handles)
    log.write_csv(out / "log.csv")
    log.write_summary(out / "summary.json")
    print(f"{scenario.mode} run: {len(log)} steps, verdict {log.verdict}; wrote {out / 'log.csv'}")
    return VERDICT_CODES[log.verdict]


COMMANDS = {"certify": cmd_certify, "negotiate": cmd_negotiate, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except NoConvergentBeta as exc:
        print(f"NO_CONVERGENT_BETA: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENT_BETA
    except (HandoverError, HierMpcError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
