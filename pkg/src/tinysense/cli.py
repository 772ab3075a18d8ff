"""Command-line entry point: generation, training, codec runs, transport
sessions, and evaluation behind one binary.

Exit codes: 0 success, 1 usage/config, 2 I/O or file format, 3 training
divergence, 4 network.  Set TS_LOG=debug|info|warning for log verbosity;
no environment variable affects behavior.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import codec, config, data, metrics, models, recovery, storage, transport

log = logging.getLogger("tinysense")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_NETWORK = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit code 1
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    grp = parser.add_argument_group("config overrides (see docs/CONFIG.md)")
    for key in config.config_keys():
        grp.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                         metavar="V", default=None)


def _collect_config(args) -> config.RunConfig:
    overrides = {}
    for key in config.config_keys():
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            overrides[key] = config.parse_value(key, raw)
    return config.build_config(getattr(args, "config", None), overrides)


def _endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def build_parser() -> _Parser:
    epilog = ("configuration keys (file `key = value` lines or flags; "
              "flags win):\n" + config.describe_defaults())
    parser = _Parser(prog="tinysense",
                     description="Task-aware vector-quantized CSI compression "
                                 "with loss-resilient edge/server streaming.",
                     epilog=epilog,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_text, **files):
        p = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="FILE", default=None,
                       help="flat key = value config file")
        for flag, (required, help_) in files.items():
            p.add_argument(flag, required=required, help=help_)
        _add_config_flags(p)
        return p

    cmd("gen", "generate a synthetic dataset (.tsds)",
        **{"--out": (True, "output dataset path")})
    cmd("train", "train the compression model on a dataset",
        **{"--data": (True, "input .tsds"), "--out": (True, "output .tsmd"),
           "--checkpoint-dir": (False, "rolling per-epoch checkpoint directory")})
    cmd("train-recovery", "train the lost-index recovery model into a bundle",
        **{"--data": (True, "input .tsds"), "--model": (True, "input .tsmd"),
           "--out": (True, "output .tsmd with recovery model")})
    p = cmd("resize-codebook", "shrink a codebook with K-means",
            **{"--model": (False, "input .tsmd (codebook source)"),
               "--codebook": (False, "input .tscb (codebook source)"),
               "--out": (True, "output .tscb")})
    p.add_argument("--to", type=int, required=True, metavar="S",
                   help="target codebook size")
    cmd("compress", "dataset -> packed VQ index maps (.tsvq)",
        **{"--data": (True, "input .tsds"), "--model": (True, "input .tsmd"),
           "--out": (True, "output .tsvq")})
    cmd("decompress", "packed index maps -> reconstructed dataset",
        **{"--in": (True, "input .tsvq"), "--model": (True, "input .tsmd"),
           "--out": (True, "output .tsds")})
    cmd("edge", "stream a dataset to a server",
        **{"--data": (True, "input .tsds"), "--model": (True, "input .tsmd"),
           "--connect": (True, "server HOST:PORT")})
    cmd("serve", "receive one edge session and reconstruct",
        **{"--model": (True, "input .tsmd"), "--listen": (True, "bind HOST:PORT"),
           "--eval-data": (False, "ground-truth .tsds for per-frame metrics"),
           "--out": (False, "write the session report here")})
    cmd("proxy", "loss-injecting TCP proxy between edge and server",
        **{"--listen": (True, "bind HOST:PORT"),
           "--forward": (True, "server HOST:PORT")})
    cmd("eval", "offline codec evaluation (NMSE/PCK/MPJPE/eta)",
        **{"--data": (True, "input .tsds"), "--model": (True, "input .tsmd"),
           "--csv": (False, "also write the report as CSV")})
    cmd("bench", "loopback latency/byte metering scenarios",
        **{"--data": (True, "input .tsds"), "--model": (True, "input .tsmd")})
    cmd("dump-embeddings", "per-frame quantized-latent means as CSV",
        **{"--data": (True, "input .tsds"), "--model": (True, "input .tsmd"),
           "--out": (True, "output .csv")})
    return parser


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _run_gen(args, cfg):
    ds = data.make_dataset(cfg.n_frames, cfg.f_dim, cfg.t_dim, cfg.c_dim,
                           joints=cfg.joints, seed=cfg.seed, paths=cfg.paths,
                           scenes=cfg.scenes, noise_std=cfg.noise_std,
                           train_frac=cfg.train_frac,
                           sample_rate_hz=cfg.sample_rate_hz)
    data.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames ({cfg.f_dim}x{cfg.t_dim}x{cfg.c_dim}, "
          f"{len(ds.train_idx)} train / {len(ds.test_idx)} test) to {args.out}")
    return EXIT_OK


def _run_train(args, cfg):
    ds = data.load_dataset(args.data)
    bundle, reports = models.train(ds, cfg, seed=cfg.seed,
                                   checkpoint_dir=args.checkpoint_dir)
    for r in reports:
        print(f"epoch {r.epoch:3d}  vq={r.l_vq:.5f} rec={r.l_rec:.5f} "
              f"key={r.l_keypoint:.5f} gan_g={r.l_gan_g:.4f} "
              f"gan_d={r.l_gan_d:.4f} lambda={r.lambda_:.3f}")
    models.save_model(bundle, args.out)
    print(f"wrote model to {args.out}")
    return EXIT_OK


def _run_train_recovery(args, cfg):
    ds = data.load_dataset(args.data)
    bundle = models.load_model(args.model)
    maps = []
    for i in ds.train_idx:
        z = bundle.encode(ds.frames[i].amplitude.astype(np.float64))
        imap, _ = bundle.quantized(z, frame_id=ds.frames[i].frame_id)
        maps.append(imap)
    bundle.transformer = recovery.train_transformer(maps, cfg, seed=cfg.seed,
                                                    vocab_size=bundle.codebook.size)
    nll = recovery.heldout_nll(bundle.transformer, maps)
    print(f"trained recovery model: train NLL/token = {nll:.4f} "
          f"(uniform = {np.log(bundle.codebook.size):.4f})")
    models.save_model(bundle, args.out)
    print(f"wrote model to {args.out}")
    return EXIT_OK


def _run_resize_codebook(args, cfg):
    if bool(args.model) == bool(args.codebook):
        raise UsageError("give exactly one of --model or --codebook")
    if args.model:
        cb = models.load_model(args.model).codebook
    else:
        cb = codec.load_codebook(args.codebook)
    small = codec.kmeans_resize(cb, args.to, seed=cfg.seed)
    codec.save_codebook(small, args.out)
    print(f"resized codebook {cb.size} -> {small.size} "
          f"(parent {cb.id.hex()}) to {args.out}")
    return EXIT_OK


def _run_compress(args, cfg):
    ds = data.load_dataset(args.data)
    bundle = models.load_model(args.model)
    maps = []
    for frame in ds.frames:
        z = bundle.encode(frame.amplitude.astype(np.float64))
        imap, _ = bundle.quantized(z, frame_id=frame.frame_id)
        maps.append(imap)
    f_dim, t_dim, c_dim = ds.frames[0].shape
    cd = codec.CompressedDataset(
        index_maps=maps, codebook_size=bundle.codebook.size,
        codebook_id=bundle.codebook.id, frame_shape=(f_dim, t_dim, c_dim),
        sample_rate_hz=ds.frames[0].sample_rate_hz,
        train_idx=ds.train_idx, test_idx=ds.test_idx)
    codec.save_compressed(cd, args.out)
    eta = codec.compression_rate(f_dim, t_dim, c_dim,
                                 int(bundle.hyper["downsample"]),
                                 bundle.codebook.size)
    print(f"compressed {len(maps)} frames at eta = {eta:.1f} to {args.out}")
    return EXIT_OK


def _run_decompress(args, cfg):
    cd = codec.load_compressed(getattr(args, "in"))
    bundle = models.load_model(args.model)
    if cd.codebook_id != bundle.codebook.id:
        raise codec.CodebookMismatchError(
            f"file codebook {cd.codebook_id.hex()} != model {bundle.codebook.id.hex()}")
    frames, labels = [], []
    for imap in cd.index_maps:
        zq = codec.dequantize(imap, bundle.codebook)
        x_hat = bundle.decode(zq)
        y_hat = bundle.estimate(zq)
        frames.append(data.CsiFrame(amplitude=x_hat.astype(np.float32),
                                    frame_id=imap.frame_id,
                                    sample_rate_hz=cd.sample_rate_hz))
        labels.append(data.PoseLabel(joints=y_hat.astype(np.float32)))
    ds = data.Dataset(frames=frames, labels=labels,
                      train_idx=cd.train_idx, test_idx=cd.test_idx)
    data.save_dataset(ds, args.out)
    print(f"reconstructed {len(frames)} frames to {args.out}")
    return EXIT_OK


def _run_edge(args, cfg):
    ds = data.load_dataset(args.data)
    bundle = models.load_model(args.model)
    stats = transport.edge_run(ds.frames, bundle, _endpoint(args.connect), cfg)
    for key, val in sorted(transport.meter(stats).items()):
        print(f"{key} = {val:.3f}")
    return EXIT_OK


def _run_serve(args, cfg):
    bundle = models.load_model(args.model)
    truth = None
    if args.eval_data:
        gt = data.load_dataset(args.eval_data)
        truth = {f.frame_id: (f.amplitude.astype(np.float64),
                              l.joints.astype(np.float64))
                 for f, l in zip(gt.frames, gt.labels)}
    result = transport.server_run(bundle, _endpoint(args.listen), cfg,
                                  eval_truth=truth)
    lines = [f"frames = {len(result.frames)}",
             f"crc_dropped_chunks = {result.crc_dropped_chunks}"]
    lost_total = sum(len(r.lost_cells) for r in result.frames)
    lines.append(f"lost_cells = {lost_total}")
    scored = [r.nmse_db for r in result.frames if r.nmse_db is not None]
    if scored:
        lines.append(f"nmse_db_mean = {float(np.mean(scored)):.4f}")
        mp = [r.mpjpe for r in result.frames if r.mpjpe is not None]
        lines.append(f"mpjpe_mean = {float(np.mean(mp)):.6f}")
    for k, v in sorted(result.edge_meter.items()):
        lines.append(f"edge.{k} = {v:.3f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def _run_proxy(args, cfg):
    lm = transport.LossModel(cfg.epsilon, seed=cfg.seed)
    host, port = _endpoint(args.listen)
    handle = transport.ProxyHandle(_endpoint(args.forward), lm, host=host, port=port)
    print(f"proxy on {handle.endpoint[0]}:{handle.endpoint[1]} -> {args.forward} "
          f"(epsilon={cfg.epsilon})")
    handle.join(timeout=None)
    print(f"dropped {len(handle.drop_log)} chunks")
    return EXIT_OK


def _run_eval(args, cfg):
    ds = data.load_dataset(args.data)
    bundle = models.load_model(args.model)
    frames = list(ds.test_idx)
    if cfg.eval_frames:
        frames = frames[:cfg.eval_frames]
    report, _ = metrics.evaluate_bundle(ds, bundle, epsilon=cfg.epsilon,
                                        frames=frames, seed=cfg.seed,
                                        pck_thresholds=tuple(cfg.pck_list()))
    print(metrics.format_report(report), end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(metrics.report_csv(report))
    return EXIT_OK


def _run_bench(args, cfg):
    ds = data.load_dataset(args.data)
    bundle = models.load_model(args.model)
    n = cfg.eval_frames or min(16, len(ds.frames))
    frames = ds.frames[:n]
    shape = frames[0].shape
    scenarios = [0.0] + ([cfg.epsilon] if cfg.epsilon > 0 else [])
    for eps in scenarios:
        server = transport.ServerHandle(bundle, cfg)
        endpoint = server.endpoint()
        proxy = None
        if eps > 0:
            proxy = transport.ProxyHandle(endpoint,
                                          transport.LossModel(eps, seed=cfg.seed))
            endpoint = proxy.endpoint
        stats = transport.edge_run(frames, bundle, endpoint, cfg)
        result = server.result()
        if proxy:
            proxy.join()
            proxy.close()
        m = transport.meter(stats, result, frame_shape=shape)
        pieces = " ".join(f"{k}={v:.3f}" for k, v in sorted(m.items()))
        print(f"scenario epsilon={eps:g}: {pieces}")
    return EXIT_OK


def _run_dump_embeddings(args, cfg):
    ds = data.load_dataset(args.data)
    bundle = models.load_model(args.model)
    rows = metrics.dump_embeddings(ds, bundle, args.out)
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen": _run_gen,
    "train": _run_train,
    "train-recovery": _run_train_recovery,
    "resize-codebook": _run_resize_codebook,
    "compress": _run_compress,
    "decompress": _run_decompress,
    "edge": _run_edge,
    "serve": _run_serve,
    "proxy": _run_proxy,
    "eval": _run_eval,
    "bench": _run_bench,
    "dump-embeddings": _run_dump_embeddings,
}


def main(argv=None) -> int:
    level = os.environ.get("TS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _collect_config(args)
        return _COMMANDS[args.command](args, cfg)
    except (UsageError, config.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except models.TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (transport.TransportError, ConnectionError) as exc:
        print(f"error: network: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (storage.FormatError, codec.CodecError, models.ModelError,
            recovery.RecoveryError, metrics.MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
