"""queenwatch command line: synth, train, ablate, quantize, export, emit-src, serve,
predict, report and parity."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import TRANSPORTS, RunConfig, load_config, parse_schema
from .errors import ConfigError, ParityBelowFloor, QueenwatchError
from .evaluate import (
    ENERGY_PRESETS,
    classification_report,
    estimate_energy,
    render_ablation,
    run_ablation,
    stratified_split,
)
from .features import feature_matrix, mask_label, parse_mask
from .gbdt import Forest, feature_importance, train
from .infer import eval_quant, infer_sample, quantize_features
from .ingest import SynthConfig, generate_synthetic, parse_dataset_csv, write_dataset_csv
from .modelfmt import emit_static_source, read_model, serialize, write_model
from .quantize import QuantSpec, parity_report, quantize_forest
from . import wire

log = logging.getLogger("queenwatch")


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _value):
        pass


def _setup_logging():
    level = os.environ.get("QUEENWATCH_LOG", "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "INFO"
    if not log.handlers:
        h = _StderrHandler()
        h.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(h)
    log.setLevel(level)
    log.propagate = False


def _stage(name, t0, **fields):
    parts = [f"stage={name}"] + [f"{k}={v}" for k, v in fields.items()]
    parts.append(f"elapsed_s={time.perf_counter() - t0:.3f}")
    log.info(" ".join(parts))


# --- argument parsing ---------------------------------------------------------

def _common(p, data=True):
    p.add_argument("--config", metavar="TOML", help="run configuration file; flags override it")
    p.add_argument("--seed", type=int, help="seed for splits and training (default 0)")
    if data:
        p.add_argument("--data", metavar="CSV", help="sensor CSV; omitted means synthetic data")
        p.add_argument("--schema", metavar="MAP",
                       help="column overrides as field=column pairs, e.g. label=state,timestamp=ts")
    p.add_argument("--format", choices=("text", "rows"), default="text",
                   help="human-readable text or tab-separated rows")


def _quant_flags(p):
    p.add_argument("--frac-bits", type=int, help="feature fraction bits (default 8)")
    p.add_argument("--leaf-bits", type=int, help="leaf fraction bits (default 16)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="queenwatch", description="Queen-presence detection pipeline.")
    ap.add_argument("--version", action="version", version=f"queenwatch {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic sensor CSV")
    _common(p, data=False)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("-n", "--n-samples", type=int, help="rows to generate (default 6000)")
    p.add_argument("--separation", type=float, help="class separation factor (default 1.5)")

    p = sub.add_parser("train", help="train, quantize and write model.qbf plus a forest JSON sidecar")
    _common(p)
    _quant_flags(p)
    p.add_argument("--out", required=True, help="QBF1 model path; the sidecar gets a .json suffix")
    p.add_argument("--subset", help="feature subset, e.g. t,h,p or t,h,p,a (default t,h,p)")
    p.add_argument("--test-out", metavar="CSV", help="also write the held-out test split")

    p = sub.add_parser("ablate", help="feature-subset ablation over repeated seeds")
    _common(p)
    p.add_argument("--seeds", type=int, metavar="N", help="seeds per subset (default 10)")
    p.add_argument("--subset", action="append", help="subset to include; repeatable (default: 8 rows)")
    p.add_argument("--out", help="write the table here as well as to stdout")
    p.add_argument("--figures", metavar="DIR", help="render an accuracy chart into DIR")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")

    p = sub.add_parser("quantize", help="lower a forest JSON to a QBF1 model")
    _common(p, data=False)
    _quant_flags(p)
    p.add_argument("--forest", required=True, help="forest JSON written by train")
    p.add_argument("--out", required=True, help="QBF1 output path")

    p = sub.add_parser("export", help="render a QBF1 model as a C byte array for flashing")
    _common(p, data=False)
    p.add_argument("--model", required=True, help="QBF1 model")
    p.add_argument("--out", required=True, help="output header path")
    p.add_argument("--name", default="qf_model_blob", help="array identifier")

    p = sub.add_parser("emit-src", help="emit portable C source for a QBF1 model")
    _common(p, data=False)
    p.add_argument("--model", required=True, help="QBF1 model")
    p.add_argument("--out", required=True, help="output .c path")
    p.add_argument("--name", default="score", help="scoring function name")

    p = sub.add_parser("serve", help="run the device loop over a transport")
    _common(p)
    p.add_argument("--model", required=True, help="QBF1 model")
    p.add_argument("--transport", choices=TRANSPORTS, help="loopback (default), replay or serial")
    p.add_argument("--replay", metavar="FILE", help="recorded host stream for the replay transport")
    p.add_argument("--record", metavar="FILE", help="write the host stream of --data to FILE and exit")
    p.add_argument("--port", help="serial device for the serial transport")
    p.add_argument("--out", help="decision rows (loopback) or raw replies (replay)")
    p.add_argument("--timeout", type=float, default=1.0, help="host reply timeout in seconds")

    p = sub.add_parser("predict", help="score rows of a CSV or one sample")
    _common(p)
    p.add_argument("--model", required=True, help="QBF1 model")
    p.add_argument("--sample", help="six comma-separated readings t_in,t_out,h_in,h_out,p_in,p_out")
    p.add_argument("--out", help="write decision rows here instead of stdout")

    p = sub.add_parser("report", help="classification report, footprint, energy and figures")
    _common(p)
    p.add_argument("--model", required=True, help="QBF1 model")
    p.add_argument("--forest", help="forest JSON (default: the model's .json sidecar if present)")
    p.add_argument("--energy-preset", choices=sorted(ENERGY_PRESETS), help="energy parameters")
    p.add_argument("--figures", metavar="DIR", help="render PNG figures into DIR")
    p.add_argument("--out", help="write the report here as well as to stdout")

    p = sub.add_parser("parity", help="float vs fixed-point agreement; exit 0 iff above the floor")
    _common(p)
    p.add_argument("--model", required=True, help="QBF1 model")
    p.add_argument("--forest", help="forest JSON (default: the model's .json sidecar)")
    p.add_argument("--floor", type=float, help="minimum agreement (default 0.995)")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "schema", None):
        cfg.schema = parse_schema(args.schema)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "seeds", None) is not None:
        cfg.n_seeds = args.seeds
    if getattr(args, "n_samples", None) is not None:
        cfg.synth = dataclasses.replace(cfg.synth, n_samples=args.n_samples)
    if getattr(args, "separation", None) is not None:
        cfg.synth = dataclasses.replace(cfg.synth, class_separation=args.separation)
    subset = getattr(args, "subset", None)
    if isinstance(subset, list):
        cfg.subsets = tuple(subset)
    fb, lb = getattr(args, "frac_bits", None), getattr(args, "leaf_bits", None)
    if fb is not None or lb is not None:
        try:
            cfg.quant = QuantSpec(fb if fb is not None else cfg.quant.feature_frac_bits,
                                  lb if lb is not None else cfg.quant.leaf_frac_bits)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if fb is not None:
        cfg.train = dataclasses.replace(cfg.train, threshold_frac_bits=fb)
    if getattr(args, "energy_preset", None):
        cfg.energy_preset = args.energy_preset
    if getattr(args, "transport", None):
        cfg.transport = args.transport
    if getattr(args, "port", None):
        cfg.port = args.port
    if getattr(args, "floor", None) is not None:
        cfg.parity_floor = args.floor
    return cfg.validate()


# --- helpers ------------------------------------------------------------------

def _load_data(cfg: RunConfig):
    t0 = time.perf_counter()
    if cfg.data:
        d = parse_dataset_csv(cfg.data, cfg.schema or None)
        _stage("ingest", t0, source=cfg.data, rows=len(d), rejected=len(d.rejected))
    else:
        d = generate_synthetic(cfg.synth)
        _stage("ingest", t0, source="synthetic", rows=len(d), seed=cfg.synth.seed)
    return d


def _emit(text: str, out=None):
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


def _sidecar(model_path) -> Path:
    return Path(model_path).with_suffix(".json")


def _load_forest(path) -> Forest:
    try:
        return Forest.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load forest {path}: {exc}") from None


def _forest_for(args, required: bool):
    path = args.forest or _sidecar(args.model)
    if args.forest or Path(path).exists():
        return _load_forest(path)
    if required:
        raise ConfigError(f"no forest given and no sidecar at {path}")
    return None


def _quant_decisions(q, X):
    return np.array([eval_quant(q, quantize_features(x, q.scaler, q.spec)).label for x in X])


# --- subcommands --------------------------------------------------------------

def cmd_synth(args, cfg):
    t0 = time.perf_counter()
    synth = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    d = generate_synthetic(synth)
    write_dataset_csv(d, args.out, cfg.schema or None)
    n_pos = int(d.labels.sum())
    _stage("synth", t0, rows=len(d), queenright=n_pos, queenless=len(d) - n_pos, out=args.out)
    return 0


def split_for_training(d, cfg: RunConfig):
    """(train, valid, test) with the run seed; the validation split drives early stopping."""
    rest, test = stratified_split(d, cfg.test_fraction, cfg.seed)
    tr, va = stratified_split(rest, cfg.valid_fraction, cfg.seed + 1)
    return tr, va, test


def cmd_train(args, cfg):
    d = _load_data(cfg)
    mask = parse_mask(args.subset or "t,h,p")
    tr, va, te = split_for_training(d, cfg)
    t0 = time.perf_counter()
    forest = train(tr, va, dataclasses.replace(cfg.train, seed=cfg.seed), mask)
    _stage("train", t0, train=len(tr), valid=len(va), trees=len(forest.trees),
           nodes=sum(t.n_nodes for t in forest.trees), subset=mask_label(mask))
    t0 = time.perf_counter()
    q = quantize_forest(forest, cfg.quant)
    blob = write_model(q, args.out)
    _sidecar(args.out).write_text(forest.to_json(), encoding="utf-8")
    _stage("quantize", t0, bytes=len(blob), out=args.out)
    if args.test_out:
        write_dataset_csv(te, args.test_out, cfg.schema or None)
    X = feature_matrix(te, mask)
    rep = classification_report(te.labels, _quant_decisions(q, X))
    if args.format == "rows":
        _emit(f"model\ttrees\tnodes\tbytes\ttest_rows\ttest_accuracy\n"
              f"{args.out}\t{q.n_trees}\t{q.n_nodes}\t{len(blob)}\t{len(te)}\t{rep.accuracy:.6f}\n")
    else:
        _emit(f"model {args.out}: {q.n_trees} trees, {q.n_nodes} nodes, {len(blob)} bytes\n"
              f"test split ({len(te)} rows, fixed-point engine):\n\n{rep.render()}")
    return 0


def cmd_ablate(args, cfg):
    d = _load_data(cfg)
    t0 = time.perf_counter()
    rows = run_ablation(d, cfg.subsets, cfg.train, seeds=[cfg.seed + i for i in range(cfg.n_seeds)],
                        test_fraction=cfg.test_fraction, cv_folds=cfg.cv_folds, n_jobs=args.jobs)
    _stage("ablate", t0, subsets=len(rows), seeds=cfg.n_seeds, folds=cfg.cv_folds)
    _emit(render_ablation(rows, args.format), args.out)
    if args.figures:
        from .plotting import ablation_figure

        path = ablation_figure(rows, Path(args.figures) / "ablation.png")
        _stage("figures", t0, out=path)
    return 0


def cmd_quantize(args, cfg):
    t0 = time.perf_counter()
    forest = _load_forest(args.forest)
    q = quantize_forest(forest, cfg.quant)
    blob = write_model(q, args.out)
    _stage("quantize", t0, trees=q.n_trees, nodes=q.n_nodes, bytes=len(blob), out=args.out)
    return 0


def cmd_export(args, cfg):
    t0 = time.perf_counter()
    blob = serialize(read_model(args.model))
    rows = [", ".join(f"0x{b:02x}" for b in blob[i: i + 12]) for i in range(0, len(blob), 12)]
    text = (f"/* QBF1 model blob, {len(blob)} bytes. */\n"
            f"const unsigned char {args.name}[{len(blob)}] = {{\n    " + ",\n    ".join(rows) + "\n};\n"
            f"const unsigned long {args.name}_len = {len(blob)}UL;\n")
    Path(args.out).write_text(text, encoding="utf-8")
    _stage("export", t0, bytes=len(blob), out=args.out)
    return 0


def cmd_emit_src(args, cfg):
    t0 = time.perf_counter()
    q = read_model(args.model)
    Path(args.out).write_text(emit_static_source(q, args.name), encoding="utf-8")
    _stage("emit-src", t0, trees=q.n_trees, nodes=q.n_nodes, out=args.out)
    return 0


def _decision_rows(decisions, spec) -> str:
    lines = ["index\tlabel\tscore_q\tprob"]
    lines += [f"{i}\t{d.label}\t{d.score_q}\t{d.prob(spec.leaf_frac_bits):.6f}" for i, d in enumerate(decisions)]
    return "\n".join(lines) + "\n"


def cmd_serve(args, cfg):
    q = read_model(args.model)
    if 3 in q.feature_mask:
        raise ConfigError("sample frames carry six environmental readings; audio models cannot be served")
    t0 = time.perf_counter()
    if args.record:
        d = _load_data(cfg)
        n = wire.write_replay([s.env for s in d], args.record)
        _stage("record", t0, frames=len(d), bytes=n, out=args.record)
        return 0
    if cfg.transport == "replay":
        if not args.replay:
            raise ConfigError("the replay transport needs --replay FILE")
        tr = wire.ReplayTransport.from_file(args.replay)
        ex = wire.DeviceLoop(tr, q).run()
        if args.out:
            Path(args.out).write_bytes(bytes(tr.written))
        else:
            sys.stdout.write(_decision_rows(wire.read_replies(bytes(tr.written)), q.spec))
        _stage("serve", t0, transport="replay", frames=ex.frames, errors=ex.errors, exit=repr(ex.reason))
        return 0
    if cfg.transport == "serial":
        if not cfg.port:
            raise ConfigError("the serial transport needs --port")
        tr = wire.SerialTransport(cfg.port, cfg.baudrate)
        try:
            ex = wire.DeviceLoop(tr, q).run()
        finally:
            tr.close()
        _stage("serve", t0, transport="serial", frames=ex.frames, errors=ex.errors, exit=repr(ex.reason))
        return 0
    d = _load_data(cfg)
    host, dev = wire.loopback_pair()
    loop, th = wire.serve_in_thread(dev, q)
    mismatches = 0
    out = []
    try:
        for s in d:
            got = wire.host_request(host, s.env, args.timeout)
            mismatches += got != infer_sample(q, s.env, s.audio_rms)
            out.append(got)
    finally:
        loop.stop()
        host.close()
        th.join(5.0)
    _stage("serve", t0, transport="loopback", frames=loop.frames, errors=loop.decoder.errors,
           mismatches=mismatches)
    text = _decision_rows(out, q.spec)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_predict(args, cfg):
    q = read_model(args.model)
    t0 = time.perf_counter()
    if args.sample:
        try:
            env = [float(v) for v in args.sample.split(",")]
        except ValueError:
            raise ConfigError("--sample needs six numbers") from None
        ds = [infer_sample(q, env)]
    else:
        d = _load_data(cfg)
        ds = [infer_sample(q, s.env, s.audio_rms) for s in d]
    _stage("predict", t0, rows=len(ds))
    if args.format == "text" and args.sample:
        d0 = ds[0]
        _emit(f"{'queenright' if d0.label else 'queenless'} (score_q {d0.score_q}, "
              f"p={d0.prob(q.spec.leaf_frac_bits):.4f})\n", args.out)
    else:
        _emit(_decision_rows(ds, q.spec), args.out)
    return 0


def cmd_report(args, cfg):
    q = read_model(args.model)
    forest = _forest_for(args, required=False)
    d = _load_data(cfg)
    t0 = time.perf_counter()
    X = feature_matrix(d, q.feature_mask)
    rep = classification_report(d.labels, _quant_decisions(q, X))
    blob_len = len(serialize(q))
    energy = ENERGY_PRESETS[cfg.energy_preset]
    mj = estimate_energy(energy)
    imp = None
    if forest is not None and forest.trees:
        try:
            imp = feature_importance(forest, "gain")
        except QueenwatchError:
            imp = None
    names = [mask_label((i,)) for i in q.feature_mask]
    if args.format == "rows":
        lines = ["key\tvalue",
                 f"rows\t{rep.total}", f"accuracy\t{rep.accuracy:.6f}",
                 f"tn\t{rep.tn}", f"fp\t{rep.fp}", f"fn\t{rep.fn}", f"tp\t{rep.tp}"]
        for c in (0, 1):
            lines += [f"precision_{c}\t{rep.precision[c]:.6f}", f"recall_{c}\t{rep.recall[c]:.6f}",
                      f"f1_{c}\t{rep.f1[c]:.6f}", f"support_{c}\t{rep.support[c]}"]
        lines += [f"model_bytes\t{blob_len}", f"trees\t{q.n_trees}", f"nodes\t{q.n_nodes}",
                  f"payload_bytes\t{wire.payload_bytes()}", f"energy_preset\t{cfg.energy_preset}",
                  f"energy_mj\t{mj:.4f}"]
        if imp is not None:
            lines += [f"importance_{n}\t{v:.6f}" for n, v in zip(names, imp)]
        text = "\n".join(lines) + "\n"
    else:
        text = (f"Classification report ({rep.total} rows, fixed-point engine)\n\n{rep.render()}\n"
                f"Confusion: tn={rep.tn} fp={rep.fp} fn={rep.fn} tp={rep.tp}\n"
                f"Footprint: model {blob_len} bytes ({q.n_trees} trees, {q.n_nodes} nodes), "
                f"sample payload {wire.payload_bytes()} bytes\n"
                f"Energy ({cfg.energy_preset}): {energy.power_mw} mW x {energy.time_s:.4g} s"
                f" = {mj:.2f} mJ per inference\n")
        if imp is not None:
            text += "Feature importance (gain): " + ", ".join(
                f"{n}={100 * v:.1f}%" for n, v in zip(names, imp)) + "\n"
    _emit(text, args.out)
    _stage("report", t0, rows=rep.total, accuracy=f"{rep.accuracy:.4f}")
    if args.figures:
        from .plotting import confusion_figure, importance_figure, loss_figure

        fig_dir = Path(args.figures)
        made = [confusion_figure(rep, fig_dir / "confusion.png")]
        if imp is not None:
            made.append(importance_figure(forest, fig_dir / "importance.png"))
            made.append(loss_figure(forest, fig_dir / "loss.png"))
        _stage("figures", t0, files=",".join(p.name for p in made), out=fig_dir)
    return 0


def cmd_parity(args, cfg):
    q = read_model(args.model)
    forest = _forest_for(args, required=True)
    d = _load_data(cfg)
    t0 = time.perf_counter()
    rep = parity_report(forest, q, feature_matrix(d, q.feature_mask))
    _stage("parity", t0, rows=rep.n_rows, agreement=f"{rep.agreement:.6f}")
    if args.format == "rows":
        _emit(f"rows\tagreement\tdisagree\tmax_abs_error\n"
              f"{rep.n_rows}\t{rep.agreement:.6f}\t{rep.n_disagree}\t{rep.max_abs_error:.9g}\n")
    else:
        _emit(f"agreement {100 * rep.agreement:.2f}% ({rep.n_rows - rep.n_disagree}/{rep.n_rows}), "
              f"max score error {rep.max_abs_error:.3g}\n")
    if rep.agreement < cfg.parity_floor:
        raise ParityBelowFloor(f"agreement {rep.agreement:.4f} below floor {cfg.parity_floor}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "ablate": cmd_ablate, "quantize": cmd_quantize,
    "export": cmd_export, "emit-src": cmd_emit_src, "serve": cmd_serve, "predict": cmd_predict,
    "report": cmd_report, "parity": cmd_parity,
}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except QueenwatchError as exc:
        print(f"queenwatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"queenwatch {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
