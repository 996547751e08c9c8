"""Command-line entry point.

Settings resolve as command-line flags > ``--config`` JSON file > built-in
defaults.  Every run writes ``manifest.json`` next to its outputs; ``replay``
re-executes a manifest and reproduces the outputs byte for byte.

Exit codes: 0 success, 1 invalid configuration, 2 diverged training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .engine import DivergedError, TrainConfig, append_diagonal_layer
from .experiments import (GridSpec, IdxDataset, SweepSpec, SyntheticTeacher, control_summary_csv,
                          grid_csv, param_grid, run_control_study, run_grid, run_recon_sweep,
                          sweep_csv)
from .init import PLAIN_XAVIER, SPARSE_XAVIER
from .matching import build_constraint_graph, max_matching
from .topology import FAMILIES, connectivity, make_topology

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2

GLOBAL_DEFAULTS = {"seed": 0, "out_dir": "out", "format": "csv", "precision": "f64", "jobs": 1}

# topology parameters shared by every command that builds one
TOPO_PARAMS = [
    # dest, flag, help
    ("n", "--n", "width of square families (fills --in/--out)"),
    ("n_in", "--in", "input width"),
    ("n_out", "--out", "output width"),
    ("depth", "--depth", "number of layers"),
    ("r", "--r", "Clos ingress/egress switch count"),
    ("n_mid", "--mid", "Clos middle switch count"),
    ("k", "--k", "low-rank bottleneck width"),
    ("d", "--d", "parallel butterfly block depth"),
    ("p", "--p", "parallel butterfly block count"),
    ("rows", "--rows", "torus rows"),
    ("cols", "--cols", "torus columns"),
]
FLAG_OF = {dest: flag for dest, flag, _ in TOPO_PARAMS}

COMMAND_DEFAULTS = {
    "topo": {"skip": False},
    "match": {"skip": False, "diag": False},
    "recon": {"skip": False, "diag": False, "seeds": 1, "loss": "l2", "lr": 0.003,
              "steps": 10000, "schedule": "linear", "record_every": 100},
    "control": {"skip": False, "seeds": 1, "iters": 1000, "lr": 0.1},
    "grid": {"depths": "1,2,5,10,20", "sparsities": "0,0.75,0.9375,0.984375", "seeds": 1,
             "epochs": 10, "lr": 0.05, "batch_size": 50, "width": 256, "n_train": 5000,
             "n_test": 1000, "scheme": SPARSE_XAVIER, "images": None, "labels": None,
             "test_images": None, "test_labels": None},
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the invalid-config code instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, out_flag: str) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="base seed (default 0)")
    p.add_argument(out_flag, dest="out_dir", default=S, help="output directory (default ./out)")
    p.add_argument("--format", choices=["csv", "json"], default=S, help="table format (default csv)")
    p.add_argument("--precision", choices=["f64", "f32"], default=S,
                   help="reconstruction arithmetic (default f64)")
    p.add_argument("--config", default=S, help="JSON file of settings; flags override it")
    p.add_argument("--jobs", type=int, default=S, help="worker processes for sweep cells (default 1)")


def _topology_flags(p: argparse.ArgumentParser, positional: bool) -> None:
    S = argparse.SUPPRESS
    if positional:
        p.add_argument("family", choices=sorted(FAMILIES))
    else:
        p.add_argument("--topology", dest="family", choices=sorted(FAMILIES), default=S,
                       help="topology family")
    for dest, flag, help_ in TOPO_PARAMS:
        p.add_argument(flag, dest=dest, default=S, help=help_)
    p.add_argument("--density", type=float, default=S, help="random family edge density")
    p.add_argument("--skip", action="store_true", default=S, help="add skip connections")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sparsecascade",
        description="A priori sparse cascades: topologies, reconstruction, matching, "
                    "controllability and trainability grids.",
        epilog="Settings resolve as flags > --config file > defaults.  Global flags go before "
               "the subcommand (--out DIR) or after it (--out-dir DIR), since topology "
               "commands use --out for the output width.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, "--out")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    S = argparse.SUPPRESS

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_flags(p, "--out-dir")
        return p

    p = add("topo", "generate a topology, print edge counts and write its JSON")
    _topology_flags(p, positional=True)

    p = add("match", "matching bound on exactly reconstructible entries")
    _topology_flags(p, positional=False)
    p.add_argument("--diag", action="store_true", default=S, help="append a diagonal layer")

    p = add("recon", "reconstruction sweep on Gaussian targets (comma lists sweep a parameter)")
    _topology_flags(p, positional=False)
    p.add_argument("--diag", action="store_true", default=S, help="append a diagonal layer")
    p.add_argument("--seeds", type=int, default=S, help="number of seeds, from --seed up (default 1)")
    p.add_argument("--loss", choices=["l2", "l1"], default=S)
    p.add_argument("--lr", type=float, default=S, help="learning rate (default 0.003)")
    p.add_argument("--steps", type=int, default=S, help="gradient steps (default 10000)")
    p.add_argument("--schedule", choices=["constant", "linear"], default=S,
                   help="learning-rate schedule (default linear)")
    p.add_argument("--record-every", dest="record_every", type=int, default=S)

    p = add("control", "train controllability and write K-matrices")
    _topology_flags(p, positional=False)
    p.add_argument("--seeds", type=int, default=S, help="number of seeds (default 1)")
    p.add_argument("--iters", type=int, default=S, help="training iterations (default 1000)")
    p.add_argument("--lr", type=float, default=S, help="learning rate (default 0.1)")

    p = add("grid", "depth x sparsity classification grid on random cascades")
    p.add_argument("--depths", default=S, help="comma list of hidden-layer counts")
    p.add_argument("--sparsities", default=S, help="comma list of sparsities, e.g. 0,15/16")
    p.add_argument("--seeds", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--width", type=int, default=S, help="hidden width (default 256)")
    p.add_argument("--n-train", dest="n_train", type=int, default=S)
    p.add_argument("--n-test", dest="n_test", type=int, default=S)
    p.add_argument("--scheme", choices=[SPARSE_XAVIER, PLAIN_XAVIER], default=S)
    p.add_argument("--images", default=S, help="IDX training images (replaces the synthetic task)")
    p.add_argument("--labels", default=S, help="IDX training labels")
    p.add_argument("--test-images", dest="test_images", default=S)
    p.add_argument("--test-labels", dest="test_labels", default=S)

    p = sub.add_parser("replay", help="re-run a manifest.json", description="re-run a manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out-dir", dest="out_dir", default=S,
                   help="write outputs here instead of the manifest's directory")
    return parser


# config resolution and validation

def resolve(args: argparse.Namespace) -> dict:
    given = {k: v for k, v in vars(args).items() if k != "config"}
    cfg_path = getattr(args, "config", None)
    file_cfg = {}
    if cfg_path is not None:
        try:
            file_cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"--config: cannot read {cfg_path}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("--config: top level must be a JSON object")
    command = given["command"]
    allowed = set(GLOBAL_DEFAULTS) | set(COMMAND_DEFAULTS[command]) | {"command"}
    if command != "grid":
        allowed |= {"family", "density"} | set(FLAG_OF)
    unknown = sorted(set(file_cfg) - allowed)
    if unknown:
        raise ConfigError(f"--config: unknown keys {unknown} for {command}")
    cfg = {**GLOBAL_DEFAULTS, **COMMAND_DEFAULTS[command], **file_cfg, **given}
    _validate(cfg)
    return dict(sorted(cfg.items()))


def _ints(text, flag: str) -> list[int]:
    if isinstance(text, int):
        return [text]
    try:
        return [int(v) for v in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"{flag} expects an integer or comma list, got {text!r}") from None


def _fraction(text: str, flag: str) -> float:
    text = text.strip()
    try:
        if "/" in text:
            a, b = text.split("/")
            return float(a) / float(b)
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{flag} expects numbers like 0.5 or 15/16, got {text!r}") from None


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: dict) -> None:
    command = cfg["command"]
    _check(cfg["jobs"] >= 1, f"--jobs must be >= 1, got {cfg['jobs']}")
    _check(cfg["format"] in ("csv", "json"), "--format must be csv or json")
    _check(cfg["precision"] in ("f64", "f32"), "--precision must be f64 or f32")
    if command != "grid":
        _check("family" in cfg, "--topology is required")
        _check(cfg["family"] in FAMILIES, f"--topology must be one of {sorted(FAMILIES)}")
        for dest, flag in FLAG_OF.items():
            if dest in cfg:
                for v in _ints(cfg[dest], flag):
                    _check(v >= 1, f"{flag} must be >= 1, got {v}")
        if "density" in cfg:
            _check(0.0 < cfg["density"] <= 1.0, f"--density must be in (0, 1], got {cfg['density']}")
    if "seeds" in cfg:
        _check(cfg["seeds"] >= 1, f"--seeds must be >= 1, got {cfg['seeds']}")
    if command == "recon":
        _check(cfg["lr"] > 0, f"--lr must be > 0, got {cfg['lr']}")
        _check(cfg["steps"] >= 0, f"--steps must be >= 0, got {cfg['steps']}")
        _check(cfg["record_every"] >= 1, f"--record-every must be >= 1, got {cfg['record_every']}")
    if command == "control":
        _check(cfg["lr"] > 0, f"--lr must be > 0, got {cfg['lr']}")
        _check(cfg["iters"] >= 0, f"--iters must be >= 0, got {cfg['iters']}")
    if command == "grid":
        for d in _ints(cfg["depths"], "--depths"):
            _check(d >= 1, f"--depths entries must be >= 1, got {d}")
        for s in str(cfg["sparsities"]).split(","):
            v = _fraction(s, "--sparsities")
            _check(0.0 <= v < 1.0, f"--sparsities entries must be in [0, 1), got {s}")
        _check(cfg["epochs"] >= 0, f"--epochs must be >= 0, got {cfg['epochs']}")
        _check(cfg["lr"] > 0, f"--lr must be > 0, got {cfg['lr']}")
        _check(cfg["batch_size"] >= 1, f"--batch-size must be >= 1, got {cfg['batch_size']}")
        _check(cfg["width"] >= 1, f"--width must be >= 1, got {cfg['width']}")
        _check(cfg["n_train"] >= 1 and cfg["n_test"] >= 1, "--n-train and --n-test must be >= 1")
        _check((cfg["images"] is None) == (cfg["labels"] is None),
               "--images and --labels must be given together")


def _topology_params(cfg: dict) -> dict:
    """Topology keyword arguments; values may be comma lists."""
    out = {dest: _ints(cfg[dest], flag) for dest, flag in FLAG_OF.items() if dest in cfg}
    if "density" in cfg:
        out["density"] = [cfg["density"]]
    return out


def _single_topology(cfg: dict):
    params = {}
    for k, v in _topology_params(cfg).items():
        _check(len(v) == 1, f"{FLAG_OF.get(k, '--' + k)} takes a single value for {cfg['command']}")
        params[k] = v[0]
    if cfg["family"] == "random":
        params.setdefault("seed", cfg["seed"])
    t = make_topology(cfg["family"], skip=cfg["skip"], **params)
    return append_diagonal_layer(t) if cfg.get("diag") else t


# commands; each returns {filename: text} and a stdout summary

def cmd_topo(cfg: dict):
    t = _single_topology(cfg)
    conn = connectivity(t)
    line = (f"name={t.name} edges={t.edge_count} trainable={t.trainable_count} "
            f"constant={t.constant_count} connectivity={conn.fraction:.9g}")
    return {"topology.json": t.to_json(indent=1, sort_keys=True) + "\n"}, line


def cmd_match(cfg: dict):
    t = _single_topology(cfg)
    g = build_constraint_graph(t)
    m = max_matching(g)
    doc = {"topology": t.name, "trainable": t.trainable_count, "constraints": len(g.constraints),
           "excluded": g.excluded, "matching": m}
    if cfg["format"] == "json":
        files = {"match.json": json.dumps(doc, indent=1, sort_keys=True) + "\n"}
    else:
        row = [len(g.constraints), len(g.edges), m]
        files = {"match.csv": "constraints,edges,matching\n" + ",".join(map(str, row)) + "\n"}
    return files, f"matching={m}"


def cmd_recon(cfg: dict):
    ranges = _topology_params(cfg)
    if cfg["family"] == "random":
        ranges.setdefault("seed", [cfg["seed"]])
    params = param_grid(**ranges)
    probe = make_topology(cfg["family"], **params[0])
    train = TrainConfig(loss=cfg["loss"], learning_rate=cfg["lr"], steps=cfg["steps"],
                        record_every=cfg["record_every"], lr_schedule=cfg["schedule"],
                        precision=cfg["precision"])
    spec = SweepSpec(cfg["family"], tuple(params), probe.n_in, probe.n_out, cfg["skip"],
                     tuple(range(cfg["seed"], cfg["seed"] + cfg["seeds"])), train,
                     diag=cfg["diag"])
    rows = run_recon_sweep(spec, jobs=cfg["jobs"])
    if cfg["format"] == "json":
        text = json.dumps([dict(zip(["topology", "params", "depth", "skip", "seed", "final_loss",
                                     "l0", "matching"], _typed(r))) for r in rows],
                          indent=1) + "\n"
        files = {"sweep.json": text}
    else:
        files = {"sweep.csv": sweep_csv(rows)}
    best = min(r.final_loss for r in rows)
    return files, f"rows={len(rows)} best_final_loss={best:.9g}"


def _typed(r):
    return [r.topology, r.params, r.depth, r.skip, r.seed, float(format(r.final_loss, ".9g")),
            r.l0, r.matching]


def cmd_control(cfg: dict):
    t = _single_topology(cfg)
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["seeds"]))
    runs = run_control_study([t], seeds, iters=cfg["iters"], lr=cfg["lr"], jobs=cfg["jobs"])
    files = {}
    for r in runs:
        if cfg["format"] == "json":
            files[f"k_seed{r.seed}.json"] = json.dumps(
                {"K": [[float(format(x, ".9g")) for x in row] for row in r.k.K],
                 "mean": float(format(r.k.mean, ".9g")),
                 "variance": float(format(r.k.variance, ".9g"))}, indent=1) + "\n"
        else:
            files[f"k_seed{r.seed}.csv"] = r.k.to_csv()
    files["control_summary.csv"] = control_summary_csv(runs)
    r = runs[0]
    return files, (f"edges={r.edges} trainable={r.trainable} sum_k={r.k.K.sum():.9g} "
                   f"variance={r.k.variance:.9g}")


def cmd_grid(cfg: dict):
    if cfg["images"] is not None:
        task = IdxDataset(cfg["images"], cfg["labels"], cfg["test_images"], cfg["test_labels"])
    else:
        task = SyntheticTeacher(seed=cfg["seed"])
    spec = GridSpec(hidden_width=cfg["width"], depths=tuple(_ints(cfg["depths"], "--depths")),
                    sparsities=tuple(_fraction(s, "--sparsities")
                                     for s in str(cfg["sparsities"]).split(",")),
                    task=task, epochs=cfg["epochs"],
                    seeds=tuple(range(cfg["seed"], cfg["seed"] + cfg["seeds"])),
                    scheme=cfg["scheme"], learning_rate=cfg["lr"], batch_size=cfg["batch_size"],
                    n_train=cfg["n_train"], n_test=cfg["n_test"])
    rows = run_grid(spec, jobs=cfg["jobs"])
    if cfg["format"] == "json":
        files = {"grid.json": json.dumps(
            [{"depth": r.depth, "sparsity": r.sparsity, "seed": r.seed,
              "accuracy": float(format(r.accuracy, ".9g")),
              "connectivity": float(format(r.connectivity, ".9g"))} for r in rows],
            indent=1) + "\n"}
    else:
        files = {"grid.csv": grid_csv(rows)}
    return files, f"cells={len(rows)}"


COMMANDS = {"topo": cmd_topo, "match": cmd_match, "recon": cmd_recon, "control": cmd_control,
            "grid": cmd_grid}


def execute(cfg: dict, out_dir: Path | None = None) -> str:
    """Run a resolved config, write outputs plus manifest, return the summary line."""
    out = Path(cfg["out_dir"]) if out_dir is None else Path(out_dir)
    files, line = COMMANDS[cfg["command"]](cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {"artifact": "sparsecascade", "version": __version__, "command": cfg["command"],
                "config": cfg, "outputs": sorted(files)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return line


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_INVALID
    try:
        if args.command == "replay":
            try:
                manifest = json.loads(Path(args.manifest).read_text())
                cfg = manifest["config"]
            except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"manifest: cannot read {args.manifest}: {e}") from None
            _validate(cfg)
            out_dir = getattr(args, "out_dir", None) or Path(args.manifest).parent
            line = execute(cfg, out_dir)
        else:
            line = execute(resolve(args))
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
