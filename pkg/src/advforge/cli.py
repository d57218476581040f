"""Command-line entry point: ``advforge {train,attack,detect,eval,probe}``.

Settings come from the built-in defaults, then an optional INI file
(``--config``; any section, ``key = value``), then command-line flags.
Exit codes: 0 ok, 1 usage, 2 I/O, 3 validation.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
import typing
from pathlib import Path

from . import __version__, data, detect_hist, detect_residual, evalkit, nn, pipeline

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 1, 2, 3

log = logging.getLogger("advforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _convert(name: str, raw: str):
    typ = pipeline.RunConfig.field_types()[name]
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    raw = raw.strip()
    if "None" in typ and raw.lower() in ("", "none", "auto"):
        return None
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    if typ.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if typ.startswith("tuple"):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def load_config(path=None, overrides: dict | None = None) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig()
    known = pipeline.RunConfig.field_types()
    if path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"cannot read config file {path}")
        for section in cp.sections():
            for key, raw in cp.items(section):
                if key not in known:
                    raise ValueError(f"unknown config key [{section}] {key}")
                setattr(cfg, key, _convert(key, raw))
    for key, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, key, _convert(key, val) if isinstance(val, str) and key != "data_dir" else val)
    return cfg


def default_config_text() -> str:
    """The shipped defaults as an INI document."""
    cfg = pipeline.RunConfig()
    lines = ["[run]"]
    for name in pipeline.RunConfig.field_types():
        val = getattr(cfg, name)
        if isinstance(val, tuple):
            val = ",".join(val)
        lines.append(f"{name} = {'auto' if val is None else val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args, cfg):
    t0 = time.time()
    net, history = pipeline.train(cfg, log=lambda msg: log.info(msg))
    x_te, y_te = data.load_mnist("test", cfg.data_dir)
    x_tr, y_tr = data.load_mnist("train", cfg.data_dir)
    nn.save_model(args.out, net)
    print(f"final loss {history[-1]:.4f}")
    print(f"train accuracy {nn.accuracy(net, x_tr[:10000], y_tr[:10000]):.4f} (first 10000 images)")
    print(f"test accuracy {nn.accuracy(net, x_te, y_te):.4f}")
    print(f"wrote {args.out} in {time.time() - t0:.1f}s")


def _load_net(path):
    net, aux = nn.load_model(path)
    return net, aux


def cmd_attack(args, cfg):
    net, _ = _load_net(args.model)
    x_te, y_te = data.load_mnist("test", cfg.data_dir)
    if x_te.shape[1:] != net.input_shape:
        raise ValueError("model input shape does not match the data")
    ds, res = pipeline.attack_set(net, x_te, y_te, args.method, args.count, cfg, pool=args.pool)
    data.save_detection_set(args.out, ds)
    if args.count:
        linf, l2 = res.distances(x_te[ds.source_index[: args.count]])
        ok = res.succeeded
        print(f"success rate {100 * res.success_rate:.2f}% ({int(ok.sum())}/{len(ok)})")
        if ok.any():
            print(f"mean linf {linf[ok].mean():.4f} mean l2 {l2[ok].mean():.4f} mean iterations {res.iterations_used[ok].mean():.2f}")
    print(f"wrote {args.out}: {int((~ds.is_adversarial).sum())} real + {int(ds.is_adversarial.sum())} adversarial")


def cmd_detect(args, cfg):
    net, aux = _load_net(args.model)
    ds = data.load_detection_set(args.set)
    if len(ds) and ds.images.shape[1:] != net.input_shape:
        raise ValueError("detection set image shape does not match the model")
    ref = data.load_detection_set(args.ref) if args.ref else None
    svm = None
    if args.detector == "hist" and args.svm and Path(args.svm).exists():
        _, svm_aux = _load_net(args.svm)
        if "svm" not in svm_aux:
            raise ValueError(f"{args.svm} holds no SVM section")
        svm = detect_hist.svm_from_aux(svm_aux["svm"])
    if args.detector == "reg" and ref is None:
        raise UsageError("detect reg needs --ref")
    if args.detector == "hist" and ref is None and svm is None:
        raise UsageError("detect hist needs --ref or an existing --svm file")
    out = pipeline.detect(args.detector, net, ds, cfg, ref=ref, svm=svm)
    if args.detector == "hist" and args.svm and not Path(args.svm).exists():
        model, hcfg = out.extra["svm"]
        nn.save_model(args.svm, net, aux={"svm": detect_hist.svm_aux(model, hcfg)})
        print(f"wrote {args.svm}")
    evalkit.write_csv(args.out, out.verdicts, [{"reg": "R", "hist": "H"}.get(args.detector, "I")])
    flags = out.verdicts.flags({"reg": "R", "hist": "H"}.get(args.detector, "I"))
    if ds.is_adversarial.any():
        pr = evalkit.precision_recall(ds.is_adversarial, flags)
        prec = "null" if pr.precision is None else f"{100 * pr.precision:.1f}%"
        print(f"{args.detector}: precision {prec} recall {100 * pr.recall:.1f}%")
    if args.dump and args.detector.startswith("resid"):
        _dump_finals(args.dump, ds, out.extra["result"])
    print(f"wrote {args.out}")


def _dump_finals(outdir, ds, res):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        detect_residual.write_pgm(outdir / f"{i:05d}_final.pgm", res.final_image[i], 0.0, 1.0)


def cmd_eval(args, cfg):
    parts = []
    for path in args.verdicts:
        v, _ = evalkit.read_csv(path)
        if v is None:
            raise ValueError(f"{path} holds no verdicts")
        parts.append(v)
    name = args.name
    v = evalkit.join(parts)
    rules = args.rules.split(",") if args.rules else list(cfg.rules)
    for rule in rules:
        try:
            v.flags(rule)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    e = evalkit.evaluate(v, rules)
    written = evalkit.report(args.out, {name: e}, {name: v}, rules)
    print((Path(args.out) / "summary.md").read_text(encoding="utf-8"), end="")
    print(f"wrote {len(written)} files to {args.out}")


def cmd_probe(args, cfg):
    net, _ = _load_net(args.model)
    ds = data.load_detection_set(args.set)
    idx = [int(i) for i in args.items.split(",")] if args.items else list(range(min(5, len(ds))))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in idx:
        if not 0 <= i < len(ds):
            raise ValueError(f"item {i} out of range")
        x = ds.images[i : i + 1]
        pair = detect_residual.residual_image(nn.local_affine_output(net, x), x)
        delta = detect_residual.perceptual_probe(nn.local_affine_feature(net, x), args.eps)
        shape = net.input_shape
        detect_residual.write_pgm(outdir / f"{i:05d}_input.pgm", x[0], 0.0, 1.0)
        detect_residual.write_pgm(outdir / f"{i:05d}_perceived.pgm", pair.perceived.reshape(shape))
        detect_residual.write_pgm(outdir / f"{i:05d}_ignored.pgm", pair.ignored.reshape(shape))
        detect_residual.write_pgm(outdir / f"{i:05d}_probe.pgm", delta.reshape(shape))
    print(f"wrote {4 * len(idx)} images to {outdir}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advforge", description="Adversarial example generation and detection on MNIST-style data.")
    p.add_argument("--version", action="version", version=f"advforge {__version__}")
    p.add_argument("--config", help="INI file with run settings (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help="MNIST directory (default: $ADVFORGE_DATA_DIR)")
    p.add_argument("--param", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train the victim network")
    s.add_argument("--out", required=True)
    s.add_argument("--train-count", type=int)
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("attack", help="build a real+adversarial detection set")
    s.add_argument("--model", required=True)
    s.add_argument("--method", required=True, choices=pipeline.ATTACKS)
    s.add_argument("--count", type=int, default=2000)
    s.add_argument("--pool", choices=("eval", "ref"), default="eval")
    s.add_argument("--out", required=True)

    s = sub.add_parser("detect", help="run one detector over a detection set")
    s.add_argument("--model", required=True)
    s.add_argument("--detector", required=True, choices=pipeline.DETECTORS)
    s.add_argument("--set", dest="set", required=True)
    s.add_argument("--ref", help="labelled reference set (S / SVM training data)")
    s.add_argument("--svm", help="ADVF file holding a trained SVM; created if missing")
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--dump", help="directory for final residual-method images (PGM)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="join verdict files and write the report bundle")
    s.add_argument("verdicts", nargs="+")
    s.add_argument("--rules", help="comma separated, e.g. T1,T2,T3,T4,R,H,I")
    s.add_argument("--name", default="set")
    s.add_argument("--out", required=True)

    s = sub.add_parser("probe", help="dump input/perceived/ignored/probe images as PGM")
    s.add_argument("--model", required=True)
    s.add_argument("--set", dest="set", required=True)
    s.add_argument("--items", help="comma separated item indices")
    s.add_argument("--eps", type=float, default=0.5)
    s.add_argument("--out", required=True)

    sub.add_parser("config", help="print the default configuration")
    return p


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "detect": cmd_detect, "eval": cmd_eval, "probe": cmd_probe}


def main(argv: typing.Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.command == "config":
            print(default_config_text(), end="")
            return EXIT_OK
        overrides = {}
        for item in args.overrides:
            if "=" not in item:
                raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
            key, val = item.split("=", 1)
            if key.strip() not in pipeline.RunConfig.field_types():
                raise UsageError(f"unknown config key {key!r}")
            overrides[key.strip()] = val
        for key in ("seed", "data_dir", "train_count", "epochs", "noise_sigma"):
            if getattr(args, key, None) is not None:
                overrides[key] = getattr(args, key)
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"advforge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, data.DataFormatError, nn.ModelFormatError) as exc:
        print(f"advforge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"advforge: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
