"""Command-line entry point: ``psido <subcommand> ...``."""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .errors import InvalidArgument, NumericalFailure, StorageError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "geometry": {"n_angles": 121, "half_range_deg": 60.0, "n_detectors": None},
    "wavelet": {"family": "haar", "J": 6, "J0": 3},
    "ista": {"lambda": 2e-6, "L": 5.0, "tol": 2e-4, "max_iter": 2000},
    "model": {"variant": "O", "n_blocks": 30, "n_groups": 10, "tau": 16, "positivity": False,
              "mode": None},
    "train": {"learning_rate": 1e-3, "epochs": 3, "batch_size": 25, "seed": 0,
              "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "data": {"n_train": 300, "n_val": 20, "n_test": 50, "max_ellipses": 10, "master_seed": 0,
             "sigma_rel": 0.01},
    "paths": {"data_dir": "data", "filters": None},
}


def _obj(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props,
            "required": list(required)}


_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

CONFIG_SCHEMA = _obj({
    "geometry": _obj({"n_angles": {"type": "integer", "minimum": 1},
                      "half_range_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 90},
                      "n_detectors": {"type": ["integer", "null"], "minimum": 2}}),
    "wavelet": _obj({"family": {"enum": ["haar", "db2", "db3", "db4"]},
                     "J": {"type": "integer", "minimum": 3, "maximum": 10},
                     "J0": {"type": "integer", "minimum": 2}}),
    "ista": _obj({"lambda": _nonneg, "L": _pos, "tol": _nonneg,
                  "max_iter": {"type": "integer", "minimum": 0}}),
    "model": _obj({"variant": {"enum": ["F", "O"]}, "n_blocks": {"type": "integer", "minimum": 0},
                   "n_groups": {"type": "integer", "minimum": 1},
                   "tau": {"type": "integer", "minimum": 1}, "positivity": {"type": "boolean"},
                   "mode": {"enum": [None, "exact", "fast"]}}),
    "train": _obj({"learning_rate": _nonneg, "epochs": {"type": "integer", "minimum": 0},
                   "batch_size": {"type": "integer", "minimum": 1}, "seed": _int,
                   "beta1": _nonneg, "beta2": _nonneg, "eps": _pos}),
    "data": _obj({"n_train": {"type": "integer", "minimum": 0},
                  "n_val": {"type": "integer", "minimum": 0},
                  "n_test": {"type": "integer", "minimum": 0},
                  "max_ellipses": {"type": "integer", "minimum": 1}, "master_seed": _int,
                  "sigma_rel": _nonneg}),
    "paths": _obj({"data_dir": {"type": "string"}, "filters": {"type": ["string", "null"]}}),
})


class ConfigError(InvalidArgument):
    pass


def _merge(base, over, path=""):
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=()):
    """Defaults, then the JSON file, then ``key.sub=value`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise StorageError("cannot read config", path) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config violates schema at {list(exc.path)}: {exc.message}") from exc
        _merge(cfg, doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.sub=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        patch = cur = {}
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = _parse_value(value)
        _merge(cfg, patch)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config violates schema at {list(exc.path)}: {exc.message}") from exc
    w = cfg["wavelet"]
    if not w["J0"] < w["J"]:
        raise ConfigError("wavelet.J0 must be smaller than wavelet.J")
    m = cfg["model"]
    if m["n_blocks"] % m["n_groups"]:
        raise ConfigError("model.n_groups must divide model.n_blocks")
    return cfg


# helpers --------------------------------------------------------------------------

def _spec(cfg):
    from .wavelet import WaveletSpec
    return WaveletSpec(cfg["wavelet"]["family"], cfg["wavelet"]["J"], cfg["wavelet"]["J0"])


def _geometry(cfg):
    from .tomo import make_geometry
    g = cfg["geometry"]
    return make_geometry(2 ** cfg["wavelet"]["J"], g["n_angles"], g["half_range_deg"],
                         g["n_detectors"])


def _ista_cfg(cfg, **kw):
    from .ista import IstaConfig
    i = cfg["ista"]
    return IstaConfig(lam=i["lambda"], L=i["L"], tol=i["tol"], max_iter=i["max_iter"], **kw)


def _check_geometry(geom, spec):
    if geom.image_side != spec.side:
        raise ConfigError(f"data side {geom.image_side} does not match wavelet side {spec.side}")


def _bank_for(cfg, geom, spec, path=None):
    from . import opbank, store
    path = path or cfg["paths"]["filters"]
    if path:
        bank = store.load_bank(path)
        if bank.geometry_hash != geom.hash() or bank.spec != spec:
            raise ConfigError("filter bank was built for a different geometry or wavelet")
        return bank
    return opbank.build_filter_bank(geom, spec)


def _network(cfg, variant, geom, spec, bank_path=None):
    from . import opbank, psidonet
    m = cfg["model"]
    tbank = None
    if variant == "F":
        tbank = opbank.truncate(_bank_for(cfg, geom, spec, bank_path), m["tau"])
        net = psidonet.Network("F", spec, m["tau"], tbank=tbank, mode=m["mode"])
    else:
        net = psidonet.Network("O", spec, m["tau"], exact=psidonet.ExactOperator(geom, spec),
                               mode=m["mode"])
    params = psidonet.ista_point(variant, spec, m["n_blocks"], m["n_groups"], m["tau"],
                                 _ista_cfg(cfg), m["positivity"], tbank)
    return net, params


def _load_split(manifest_path, split, spec, noisy=True):
    from . import store
    from .tomo import Geometry
    from .wavelet import dwt2_array
    from .tomo import backproject

    manifest = store.load_manifest(manifest_path)
    geom = Geometry.from_descriptor(manifest.geometry)
    _check_geometry(geom, spec)
    root = Path(manifest_path).parent
    entries = manifest.split(split)
    images = np.array([store.load_image(root / e["image"]) for e in entries])
    key = "noisy_sinogram" if noisy else "sinogram"
    sinos = np.array([store.load_sinogram(root / e[key])[0] for e in entries])
    b = np.array([dwt2_array(backproject(s, geom), spec) for s in sinos]) if len(entries) else None
    return geom, entries, images, sinos, b


# subcommands ----------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    from .phantom import DatasetConfig, generate_dataset
    d, g = cfg["data"], cfg["geometry"]
    out = args.out or cfg["paths"]["data_dir"]
    dc = DatasetConfig(out, 2 ** cfg["wavelet"]["J"], d["n_train"], d["n_val"], d["n_test"],
                       d["max_ellipses"], d["master_seed"], d["sigma_rel"], g["n_angles"],
                       g["half_range_deg"], g["n_detectors"])
    manifest = generate_dataset(dc, workers=args.threads or 1)
    print(f"wrote {len(manifest.entries)} entries to {Path(out) / 'manifest.json'}")


def cmd_build_filters(args, cfg):
    from . import opbank, store
    geom, spec = _geometry(cfg), _spec(cfg)
    bank = opbank.build_filter_bank(geom, spec)
    store.save_bank(args.out, bank)
    print(f"wrote {len(bank)} filters to {args.out}")


def cmd_verify(args, cfg):
    from .checks import run_checks
    g, w = cfg["geometry"], cfg["wavelet"]
    results = run_checks(g["n_angles"], g["half_range_deg"], w["family"], w["J"], w["J0"])
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}  ({r.seconds:.1f}s)")
    if not all(r.passed for r in results):
        raise NumericalFailure("verification failed")


def cmd_ista(args, cfg):
    from . import ista, psidonet, store
    from .wavelet import idwt2_array
    sino, geom = store.load_sinogram(args.input)
    spec = _spec(cfg)
    _check_geometry(geom, spec)
    ex = psidonet.ExactOperator(geom, spec)
    w, trace = ista.ista_run(ex, ex.rhs(sino), _ista_cfg(cfg))
    store.save_image(args.out, idwt2_array(w, spec))
    trace.to_csv(args.trace or str(args.out) + ".trace.csv")
    print(f"iterations {trace.iterations} termination {trace.reason}")


def cmd_fbp(args, cfg):
    from . import store, tomo
    sino, geom = store.load_sinogram(args.input)
    store.save_image(args.out, tomo.fbp(sino, geom))
    print(f"wrote {args.out}")


def cmd_train(args, cfg):
    from . import psidonet, store
    from .wavelet import dwt2_array
    spec = _spec(cfg)
    geom, _, img_tr, _, b_tr = _load_split(args.data, "train", spec)
    _, _, img_va, _, b_va = _load_split(args.data, "val", spec)
    if b_tr is None or b_va is None:
        raise ConfigError("dataset needs non-empty train and val splits")
    net, params = _network(cfg, args.variant, geom, spec, args.filters)
    t = cfg["train"]
    tc = psidonet.TrainConfig(t["learning_rate"], t["epochs"], t["batch_size"], t["beta1"],
                              t["beta2"], t["eps"], t["seed"])
    res = psidonet.train(net, params, (b_tr, dwt2_array(img_tr, spec)),
                         (b_va, dwt2_array(img_va, spec)), tc, log=print)
    store.save_checkpoint(args.out, psidonet.make_checkpoint(net, res.params, geom, res.history,
                                                             res.val_history))
    store.save_checkpoint(str(args.out) + ".best",
                          psidonet.make_checkpoint(net, res.best_params, geom, res.history,
                                                   res.val_history))
    print(f"saved {args.out} (best epoch {res.best_epoch})")


def _checkpoint_bank(ckpt, geom, bank_path):
    from . import opbank, store
    from .wavelet import WaveletSpec
    if ckpt.params.variant != "F":
        return None
    spec = WaveletSpec(**ckpt.spec_descriptor)
    bank = store.load_bank(bank_path) if bank_path else opbank.build_filter_bank(geom, spec)
    return opbank.truncate(bank, ckpt.params.tau)


def cmd_reconstruct(args, cfg):
    from . import psidonet, store
    ckpt = store.load_checkpoint(args.ckpt)
    sino, geom = store.load_sinogram(args.input)
    image = psidonet.reconstruct(ckpt, sino, geom, _checkpoint_bank(ckpt, geom, args.filters))
    store.save_image(args.out, image)
    print(f"wrote {args.out}")


def cmd_eval(args, cfg):
    from . import ista, metrics, psidonet, store, tomo
    from .wavelet import idwt2_array, WaveletSpec
    spec = _spec(cfg)
    if args.method in ("F", "O"):
        if not args.ckpt:
            raise ConfigError("--ckpt is required for network methods")
        ckpt = store.load_checkpoint(args.ckpt)
        if ckpt.params.variant != args.method:
            raise ConfigError("checkpoint variant differs from --method")
        spec = WaveletSpec(**ckpt.spec_descriptor)
    geom, entries, images, sinos, b = _load_split(args.manifest, args.split, spec)
    if b is None:
        raise ConfigError(f"split {args.split!r} is empty")
    if args.method == "fbp":
        recons = [tomo.fbp(s, geom) for s in sinos]
    elif args.method == "ista":
        ex = psidonet.ExactOperator(geom, spec)
        recons = [idwt2_array(ista.ista_run(ex, bi, _ista_cfg(cfg, record_trace=False))[0], spec)
                  for bi in b]
    else:
        net = psidonet.network_for(ckpt, geom, _checkpoint_bank(ckpt, geom, args.filters))
        out, _ = net.forward(ckpt.params, b)
        recons = list(idwt2_array(out, spec))
    report = metrics.evaluate(recons, images, [e["id"] for e in entries])
    report.to_csv(args.out)
    means = report.means()
    print(f"method {args.method} n {report.count} " + " ".join(f"{k} {v:.4f}" for k, v in means.items()))


def build_parser():
    ap = argparse.ArgumentParser(prog="psido", description="Limited-angle CT with ISTA and unrolled networks")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. ista.lambda=1e-5")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate phantoms, sinograms and a manifest")
    p.add_argument("--out", default=None)
    p = add("build-filters", cmd_build_filters, "build the wavelet-domain filter bank")
    p.add_argument("--out", required=True)
    add("verify", cmd_verify, "run the small-scale oracle checks")
    p = add("ista", cmd_ista, "ISTA reconstruction of one sinogram")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p = add("fbp", cmd_fbp, "filtered backprojection of one sinogram")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p = add("train", cmd_train, "train an unrolled network")
    p.add_argument("--variant", choices=["F", "O"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filters", default=None)
    p = add("reconstruct", cmd_reconstruct, "reconstruct with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filters", default=None)
    p = add("eval", cmd_eval, "evaluate a method on a dataset split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=["fbp", "ista", "F", "O"], required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--filters", default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True)
    return ap


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        try:
            import numba
            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        except ImportError:
            pass
    try:
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (StorageError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except (InvalidArgument, ValueError) as exc:
        return _fail(EXIT_CONFIG, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
