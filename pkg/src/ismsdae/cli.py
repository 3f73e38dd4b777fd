"""Command-line front end: synth -> dataset -> train -> eval, plus selftest."""

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .capture import (
    DEFAULT_PAYLOAD_RANGES,
    TrafficProfile,
    extract_emissions,
    list_captures,
    load_capture,
    record_capture,
    save_capture,
)
from .config import load_config
from .dataset import build_dataset, load_dataset, save_dataset, split
from .errors import DatasetBuildError, IsmError, ParameterError, TrainingDivergenceError
from .impairments import ImpairmentPolicy
from .nn import SparsityConfig, count_params, load_model, save_model
from .report import add_eval_noise, emit_report, log_training_curve, snr_sweep
from .sdae import DaeConfig, grid_search, train_reference_fc, train_sdae_classifier
from .seeding import derive_seed
from .selftest import run_selftest
from .waveforms import ProtocolClass

log = logging.getLogger("ismsdae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n")


def _tag(cfg):
    return f"{cfg.dataset.burst_mode}_{cfg.dataset.channel_mode}"


def dataset_paths(cfg):
    d, tag = cfg.dataset_dir, _tag(cfg)
    return {name: d / f"{name}_{tag}.ismb" for name in ("train", "valid", "eval_pool")}


def make_policy(cfg, target_snr_db, label):
    p = cfg.policy
    return ImpairmentPolicy(
        target_snr_db=target_snr_db,
        freq_jitter_std_hz=p.freq_jitter_std_hz,
        time_jitter_max_samples=p.time_jitter_max_samples,
        channel_mode=cfg.dataset.channel_mode,
        gain_db=p.gain_db,
        rng_seed=derive_seed(cfg.seed, "policy", label),
    )


def cmd_synth(cfg, echo=print):
    """Write capture pairs for every class and traffic profile.

    In start mode each class keeps gaining captures until it has one
    emission per requested burst.
    """
    ds = cfg.dataset
    counts = {}
    for part, n_per, need in (("train", cfg.synth.captures_per_profile, ds.per_class),
                              ("eval", cfg.synth.eval_captures_per_profile, ds.eval_per_class)):
        out = cfg.capture_dir / part
        out.mkdir(parents=True, exist_ok=True)
        for protocol in ProtocolClass:
            n_em, k = 0, 0
            while True:
                for dist in cfg.synth.profiles:
                    prof = TrafficProfile(DEFAULT_PAYLOAD_RANGES[protocol], dist)
                    seed = derive_seed(cfg.seed, "synth", part, protocol.name, dist, k)
                    stream = record_capture(protocol, prof, cfg.synth.duration_s, seed)
                    save_capture(stream, out / f"{protocol.name}_{dist}_{k:03d}")
                    n_em += len(extract_emissions(stream, pre_buffer=ds.pre_buffer))
                k += 1
                if k >= n_per and (ds.burst_mode != "start" or n_em >= need):
                    break
            counts[(part, protocol.name)] = n_em
            echo(f"{part:5s} {protocol.name:5s} captures={k * len(cfg.synth.profiles):4d} "
                 f"emissions={n_em}")
        _write_manifest(out, "*.sigmeta.json", cfg)
    return counts


def _write_manifest(directory, pattern, cfg):
    """manifest.json tying every matching file (and its data twin) to the config hash."""
    files = {}
    for p in sorted(Path(directory).glob(pattern)):
        files[p.name] = sha256_file(p)
        twin = Path(str(p).removesuffix(".sigmeta.json") + ".iq")
        if twin != p and twin.exists():
            files[twin.name] = sha256_file(twin)
    _write_json(Path(directory) / "manifest.json",
                {"config_sha256": cfg.digest(), "seed": cfg.seed, "files": files})


def _load_captures(cfg, part):
    paths = list_captures(cfg.capture_dir / part)
    if not paths:
        raise DatasetBuildError(f"no captures under {cfg.capture_dir / part}; run synth first")
    return [load_capture(p) for p in paths]


def cmd_dataset(cfg, echo=print):
    ds = cfg.dataset
    cfg.dataset_dir.mkdir(parents=True, exist_ok=True)
    paths = dataset_paths(cfg)

    full = build_dataset(_load_captures(cfg, "train"), make_policy(cfg, ds.train_snr_db, "train"),
                         ds.burst_mode, ds.per_class, ds.burst_len,
                         seed=derive_seed(cfg.seed, "dataset", "train"), pre_buffer=ds.pre_buffer)
    train, valid = split(full, 1 - ds.valid_fraction, derive_seed(cfg.seed, "split"))
    pool = build_dataset(_load_captures(cfg, "eval"), make_policy(cfg, None, "eval"),
                         ds.burst_mode, ds.eval_per_class, ds.burst_len,
                         seed=derive_seed(cfg.seed, "dataset", "eval"), pre_buffer=ds.pre_buffer)
    for name, data in (("train", train), ("valid", valid), ("eval_pool", pool)):
        save_dataset(data, paths[name])
        balance = " ".join(f"{n}={c}" for n, c in zip(data.label_map, data.class_counts()))
        echo(f"{name:9s} {len(data):6d} records  {balance}  -> {paths[name]}")
    _write_manifest(cfg.dataset_dir, f"*_{_tag(cfg)}.ismb", cfg)
    return paths


def _dae_configs(cfg, feature_len):
    s = cfg.sdae
    dims = (feature_len,) + tuple(s.bottlenecks)
    sp = SparsityConfig(s.rho, s.lam)
    return [DaeConfig(dims[i], dims[i + 1], s.dusting[i], sp,
                      replace(s.dae_train, seed=derive_seed(cfg.seed, "dae", i)))
            for i in range(3)]


def cmd_train(cfg, variant, grid=False, echo=print):
    if variant not in ("sdae", "reference"):
        raise ParameterError(f"unknown variant {variant!r}")
    paths = dataset_paths(cfg)
    train, valid = load_dataset(paths["train"]), load_dataset(paths["valid"])
    pool = load_dataset(paths["eval_pool"])
    track_seed = derive_seed(cfg.seed, "track")
    track = {f"{snr:g}dB": add_eval_noise(pool, snr, track_seed) for snr in cfg.track_snr}
    cfg.model_dir.mkdir(parents=True, exist_ok=True)
    tag = _tag(cfg)

    tune = replace(cfg.finetune, seed=derive_seed(cfg.seed, "finetune"))
    head = replace(cfg.head, seed=derive_seed(cfg.seed, "head"))
    ref_cfg = replace(cfg.reference, seed=derive_seed(cfg.seed, "reference"))
    dae_cfgs = _dae_configs(cfg, train.feature_len)

    if grid:
        rows = grid_search(train, valid, dae_cfgs, head, tune, cfg.sdae.grid_rhos,
                           cfg.sdae.grid_lams)
        out = cfg.model_dir / f"grid_search_{tag}.csv"
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rho", "lambda", "valid_acc"])
            w.writerows([[r, l, repr(a)] for r, l, a in rows])
        echo("rho     lambda  valid_acc")
        for r, l, a in rows:
            echo(f"{r:<7g} {l:<7g} {a:.4f}")
        return out

    manifest = {
        "variant": variant,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "datasets": {k: sha256_file(v) for k, v in paths.items()},
    }
    if variant == "sdae":
        manifest.update(dae=[c.to_dict() for c in dae_cfgs], head=asdict(head),
                        finetune=asdict(tune))
    else:
        manifest.update(reference=asdict(ref_cfg))
    manifest_blob = json.dumps(manifest, sort_keys=True).encode()
    manifest_hash = hashlib.sha256(manifest_blob).hexdigest()

    curve = []
    if variant == "sdae":
        net, stack, _ = train_sdae_classifier(train, valid, dae_cfgs, head, tune, log_to=curve,
                                              track=track)
        for i, st in enumerate(stack.stages, 1):
            echo(f"stage {i}: {st.config.input_dim}->{st.config.bottleneck_dim} "
                 f"final loss {st.final_train_loss:.4f}")
    else:
        net = train_reference_fc(train, valid, ref_cfg, log_to=curve, track=track)
    mults, trainable = count_params(net)
    net.meta.update(variant=variant, manifest_sha256=manifest_hash,
                    multiplications=mults, trainable=trainable)

    stem = cfg.model_dir / f"{variant}_{tag}"
    save_model(net, stem.with_suffix(".ismn"))
    if variant == "sdae":
        for i, st in enumerate(stack.stages, 1):
            ae = st.autoencoder().copy()
            ae.meta = {"stage": i, "dusting_sigma": st.config.dusting_sigma,
                       "rho": st.config.sparsity.rho, "lam": st.config.sparsity.lam,
                       "final_train_loss": st.final_train_loss,
                       "manifest_sha256": manifest_hash}
            save_model(ae, f"{stem}.stage{i}.ismn")
    Path(f"{stem}.manifest.json").write_bytes(manifest_blob + b"\n")
    log_training_curve(curve, f"{stem}.curve.csv")
    echo(f"{variant}: dims={'-'.join(map(str, net.dims))} multiplications={mults} "
         f"trainable={trainable} best_epoch={net.meta['best_epoch']} "
         f"valid_acc={net.meta['best_valid_acc']:.4f}")
    return stem.with_suffix(".ismn")


def cmd_eval(cfg, model_paths=None, snr_grid=None, echo=print):
    paths = dataset_paths(cfg)
    pool = load_dataset(paths["eval_pool"])
    if not model_paths:
        model_paths = sorted(cfg.model_dir.glob(f"*_{_tag(cfg)}.ismn"))
    if not model_paths:
        raise DatasetBuildError(f"no models found under {cfg.model_dir}")
    grid = tuple(snr_grid) if snr_grid else cfg.snr_grid
    sweeps = []
    for mp in model_paths:
        model = load_model(mp)
        model_id = Path(mp).stem
        sweep = snr_sweep(model, pool, grid, seed=derive_seed(cfg.seed, "eval"),
                          model_id=model_id, dataset_id=paths["eval_pool"].name)
        sweeps.append(sweep)
        accs = " ".join(f"{s:g}dB={a:.3f}" for s, a in zip(sweep.snr_grid_db, sweep.accuracy))
        echo(f"{model_id}: {accs}")
        for snr, bt_nrf, other, dom in sweep.bt_nrf_diagnostic():
            if not dom:
                echo(f"  warning: at {snr:g} dB BT<->NRF confusion ({bt_nrf:.3f}) is not the "
                     f"dominant pair (max other {other:.3f})")
    written = emit_report(sweeps, cfg.report_dir)
    _write_json(cfg.report_dir / "run_info.json", {
        "config_sha256": cfg.digest(),
        "eval_pool_sha256": sha256_file(paths["eval_pool"]),
        "models": {Path(m).name: load_model(m).meta.get("manifest_sha256", "")
                   for m in model_paths},
        "snr_grid": list(grid),
    })
    return written


def cmd_selftest(echo=print, kl_impl=None):
    kwargs = {} if kl_impl is None else {"kl_impl": kl_impl}
    results = run_selftest(echo=echo, **kwargs)
    return all(ok for _, ok, _ in results)


def cmd_run(cfg, echo=print):
    cmd_synth(cfg, echo)
    cmd_dataset(cfg, echo)
    cmd_train(cfg, "sdae", echo=echo)
    cmd_train(cfg, "reference", echo=echo)
    return cmd_eval(cfg, echo=echo)


def _parse_snr(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="output root directory (overrides config)")
    common.add_argument("--burst-mode", choices=("start", "random"))
    common.add_argument("--channel-mode", choices=("randomize", "baseband"))
    common.add_argument("--per-class", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ismsdae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="synthesize clean capture files")
    sub.add_parser("dataset", parents=[common], help="build train/valid/eval datasets")
    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--variant", choices=("sdae", "reference"), default="sdae")
    p.add_argument("--grid-search", action="store_true",
                   help="tabulate validation accuracy over the rho/lambda grid")
    p = sub.add_parser("eval", parents=[common], help="SNR sweep and report")
    p.add_argument("models", nargs="*", help="model files (default: all for this mode)")
    p.add_argument("--snr", type=_parse_snr, help="comma-separated SNR grid in dB")
    sub.add_parser("run", parents=[common], help="synth, dataset, train both, eval")
    p = sub.add_parser("selftest", help="numerical self-checks")
    p.add_argument("--perturb-kl", action="store_true", help=argparse.SUPPRESS)
    return parser


def _resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    ds = cfg.dataset
    cfg.dataset = replace(ds, burst_mode=args.burst_mode or ds.burst_mode,
                          channel_mode=args.channel_mode or ds.channel_mode,
                          per_class=args.per_class or ds.per_class)
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            kl_impl = None
            if args.perturb_kl:
                from .nn import kl_sparsity

                def kl_impl(rho, rho_hat):
                    return kl_sparsity(rho, rho_hat) * (1 + 1e-6)
            return EXIT_OK if cmd_selftest(kl_impl=kl_impl) else EXIT_DATA
        try:
            cfg = _resolve_config(args)
        except ParameterError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "dataset":
            cmd_dataset(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.variant, grid=args.grid_search)
        elif args.command == "eval":
            cmd_eval(cfg, args.models, args.snr)
        elif args.command == "run":
            cmd_run(cfg)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged (stage={exc.stage}, epoch={exc.epoch}): {exc}",
              file=sys.stderr)
        return EXIT_TRAIN
    except (IsmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
