"""Command-line entry point: datagen, pretrain, sft, eval, serve-bench, serve, rerun.

Configuration is a flat ``key=value`` file plus ``key=value`` overrides on the
command line (overrides win). Every subcommand writes a JSON manifest with the
fully resolved configuration before doing any work; ``rerun MANIFEST``
repeats a run from it.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from .data import build_sft_dataset, make_splits, read_corpus_jsonl, read_events_jsonl, write_corpus_jsonl, \
    write_events_jsonl
from .errors import ConfigurationError, DataError, NumericalError
from .model import Model, ModelConfig
from .retrieval import build_index, conditioned_eval, general_eval, horizon_eval, last_request_cuts
from .serving import ServeRequest, Server, global_fallback, latency_bench, serve_stdio, write_latency_csv
from .synth import SynthConfig, generate_dataset
from .training import TrainConfig, train_pretrain, train_sft, write_loss_csv

log = logging.getLogger("genrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

_SYNTH_KEYS = [f.name for f in dataclasses.fields(SynthConfig) if f.name != "seed"]
_MODEL_KEYS = ["d", "num_backbone_layers", "num_heads", "num_branches", "hash_buckets", "max_seq_len",
               "null_token", "condition_embedding", "rel_buckets", "rel_max_distance", "init_std"]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


def _defaults(cls, keys):
    base = {f.name: f.default for f in dataclasses.fields(cls)}
    return {k: base[k] for k in keys}


DEFAULTS = {
    "seed": 0,
    **_defaults(SynthConfig, _SYNTH_KEYS),
    **_defaults(ModelConfig, _MODEL_KEYS),
    **_defaults(TrainConfig, _TRAIN_KEYS),
    "eval_requests": 2,
    "sft_fraction": 0.2,
    "horizon": 10,
    "k": 50,
    "P": 4,
    "window": 200,
    "serve_temporal": False,
    "bench_requests": 32,
    "trials": 10,
    "P_sweep": "1,2,4,8",
}


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None


def parse_assignments(lines, source="<args>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigurationError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    cfg = dict(DEFAULTS)
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            cfg.update(parse_assignments(f, config_path))
    cfg.update(parse_assignments(overrides))
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def synth_config(cfg) -> SynthConfig:
    return SynthConfig(seed=cfg["seed"], **{k: cfg[k] for k in _SYNTH_KEYS})


def train_config(cfg) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **{k: cfg[k] for k in _TRAIN_KEYS})


def model_config(cfg, catalog) -> ModelConfig:
    family = cfg["condition_family"]
    return ModelConfig(num_genres=int(catalog.genre.max()) + 1, num_languages=int(catalog.language.max()) + 1,
                       num_release=2, condition_family=family,
                       num_conditions=int(catalog.attribute(family).max()) + 1,
                       **{k: cfg[k] for k in _MODEL_KEYS})


def blob_hash(path) -> str:
    """Git-style content hash: sha1 over ``blob <size>\\0`` + bytes."""
    h = hashlib.sha1(f"blob {os.path.getsize(path)}\0".encode())
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- subcommands --------------------------------------------------------------

def _load_data(data_dir):
    catalog = read_corpus_jsonl(os.path.join(data_dir, "corpus.jsonl"))
    logs = read_events_jsonl(os.path.join(data_dir, "logs.jsonl"))
    return catalog, logs


def _splits(cfg, logs):
    return make_splits(logs, eval_requests=cfg["eval_requests"], sft_fraction=cfg["sft_fraction"])


def _progress(stage):
    def report(step, loss):
        if step % 50 == 0 or step == 1:
            log.info("%s step %d loss %.4f", stage, step, loss)
    return report


def cmd_datagen(cfg, paths):
    items, _, logs = generate_dataset(synth_config(cfg))
    write_corpus_jsonl(os.path.join(paths["out"], "corpus.jsonl"), items)
    write_events_jsonl(os.path.join(paths["out"], "logs.jsonl"), logs)
    log.info("wrote %d items, %d events for %d users", len(items), len(logs), logs.num_users)


def cmd_pretrain(cfg, paths):
    catalog, logs = _load_data(paths["data"])
    tc = train_config(cfg)
    res = train_pretrain(logs, catalog, _splits(cfg, logs), model_config(cfg, catalog), tc,
                         progress=_progress("pretrain"))
    res.model.save(os.path.join(paths["out"], "pretrain.ckpt"), res.meta)
    write_loss_csv(os.path.join(paths["out"], "pretrain_loss.csv"), res.losses, res.model.config.num_branches)


def _load_checkpoint(cfg, paths):
    if not paths.get("checkpoint"):
        raise ConfigurationError("this subcommand needs --checkpoint")
    catalog, logs = _load_data(paths["data"])
    model, meta = Model.load(paths["checkpoint"], catalog)
    return catalog, logs, model, meta


def cmd_sft(cfg, paths):
    catalog, logs, model, meta = _load_checkpoint(cfg, paths)
    tc = train_config(cfg)
    family = model.config.condition_family
    sft = build_sft_dataset(logs, catalog, family, _splits(cfg, logs), vocab_size=model.config.num_conditions)
    res = train_sft(model, meta, logs, catalog, sft, tc, progress=_progress("sft"))
    res.model.save(os.path.join(paths["out"], "sft.ckpt"), res.meta)
    write_loss_csv(os.path.join(paths["out"], "sft_loss.csv"), res.losses, res.model.config.num_branches)


def cmd_eval(cfg, paths):
    catalog, logs, model, _ = _load_checkpoint(cfg, paths)
    model.freeze()
    index = build_index(model, catalog)
    mode = paths["mode"]
    ks = tuple(k for k in (10, 20, 50) if k <= len(catalog))
    splits = _splits(cfg, logs)
    if mode == "general":
        report = general_eval(index, model, logs, ks)
    elif mode == "conditioned":
        report = conditioned_eval(index, model, logs, splits, model.config.condition_family, ks)
    else:
        curve = horizon_eval(index, model, logs, splits, horizon=cfg["horizon"], k=cfg["k"])
        from .retrieval import EvalReport
        report = EvalReport({"slope": curve.slope()}, {"examples": curve.n[0], "skipped": curve.skipped}, curve)
        curve.write_csv(os.path.join(paths["out"], "horizon.csv"))
    report.write_csv(os.path.join(paths["out"], f"eval_{mode}.csv"))
    with open(os.path.join(paths["out"], f"eval_{mode}.json"), "w", encoding="utf-8") as f:
        f.write(report.summary_json() + "\n")
    log.info("%s: %s", mode, report.summary_json())


def _server(cfg, paths):
    catalog, logs, model, _ = _load_checkpoint(cfg, paths)
    model.freeze()
    server = Server(model, build_index(model, catalog), family=model.config.condition_family, P=cfg["P"],
                    window=cfg["window"], fallback=global_fallback(logs, catalog, model.config.condition_family),
                    serve_temporal=cfg["serve_temporal"], delta_tau=cfg["delta_tau"])
    return server, logs


def _bench_requests(cfg, logs, k):
    users, cuts = last_request_cuts(logs)
    users, cuts = users[:cfg["bench_requests"]], cuts[:cfg["bench_requests"]]
    reqs = []
    for u, c in zip(users, cuts):
        s = logs.offsets[u]
        reqs.append(ServeRequest(int(logs.user_ids[u]), logs.item[s:s + c].tolist(), k,
                                 logs.ts[s:s + c].tolist(), int(logs.ts[s + c])))
    return reqs, users, cuts


def cmd_serve_bench(cfg, paths):
    server, logs = _server(cfg, paths)
    reqs, users, cuts = _bench_requests(cfg, logs, cfg["k"])
    if not reqs:
        raise DataError("no users with a history to benchmark")
    upto = np.zeros(logs.num_users, dtype=np.int64)
    upto[users] = cuts
    server.precompute(logs, upto)
    # deterministic retrieval results alongside the timing table
    with open(os.path.join(paths["out"], "serve_results.jsonl"), "w", encoding="utf-8") as f:
        for r in reqs:
            resp = server.serve(r)
            f.write(json.dumps({"user_id": resp.user_id, "results": resp.results,
                                "cache_computed_at": resp.cache_computed_at}, sort_keys=True) + "\n")
    sweep = tuple(int(p) for p in cfg["P_sweep"].split(","))
    rows = latency_bench(server, reqs, sweep, trials=cfg["trials"])
    write_latency_csv(os.path.join(paths["out"], "latency.csv"), rows)


def cmd_serve(cfg, paths):
    server, logs = _server(cfg, paths)
    server.precompute(logs)
    serve_stdio(server, sys.stdin, sys.stdout)


COMMANDS = {"datagen": cmd_datagen, "pretrain": cmd_pretrain, "sft": cmd_sft, "eval": cmd_eval,
            "serve-bench": cmd_serve_bench, "serve": cmd_serve}
# output files each subcommand produces, relative to --out
OUTPUTS = {
    "datagen": ["corpus.jsonl", "logs.jsonl"],
    "pretrain": ["pretrain.ckpt", "pretrain_loss.csv"],
    "sft": ["sft.ckpt", "sft_loss.csv"],
    "serve-bench": ["serve_results.jsonl", "latency.csv"],
    "serve": [],
}


def outputs_of(command, mode=None):
    if command == "eval":
        return [f"eval_{mode}.csv", f"eval_{mode}.json"] + (["horizon.csv"] if mode == "horizon" else [])
    return OUTPUTS[command]


def manifest_name(command, mode=None):
    return f"manifest-{command}{'-' + mode if mode else ''}.json"


def run(command, cfg, paths) -> dict:
    """Write the manifest, run ``command``, then re-write the manifest with the end time."""
    if command != "serve":
        os.makedirs(paths["out"], exist_ok=True)
    inputs = {}
    for key in ("data", "checkpoint"):
        p = paths.get(key)
        if not p:
            continue
        files = [os.path.join(p, n) for n in ("corpus.jsonl", "logs.jsonl")] if key == "data" else [p]
        for fp in files:
            if not os.path.exists(fp):
                raise DataError(f"missing input {fp}")
            inputs[fp] = blob_hash(fp)
    manifest = {"subcommand": command, "config": cfg, "seed": cfg["seed"], "paths": paths,
                "input_hashes": inputs, "started_at": time.time(), "finished_at": None}
    mpath = None
    if command != "serve":
        mpath = os.path.join(paths["out"], manifest_name(command, paths.get("mode")))
        _write_json(mpath, manifest)
    COMMANDS[command](cfg, paths)
    manifest["finished_at"] = time.time()
    if mpath:
        _write_json(mpath, manifest)
    return manifest


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="genrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, checkpoint=False, out=True):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int, help="overrides the seed key")
        if data:
            sp.add_argument("--data", required=True, help="directory with corpus.jsonl and logs.jsonl")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint file")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    common(sub.add_parser("datagen", help="generate a synthetic corpus and interaction log"), data=False)
    common(sub.add_parser("pretrain", help="pre-train (ablation=nip|mip|tamip)"))
    common(sub.add_parser("sft", help="condition fine-tuning from a pre-trained checkpoint"), checkpoint=True)
    ev = sub.add_parser("eval", help="offline evaluation")
    ev.add_argument("--mode", choices=("general", "conditioned", "horizon"), default="general")
    common(ev, checkpoint=True)
    common(sub.add_parser("serve-bench", help="serving latency sweep over P"), checkpoint=True)
    common(sub.add_parser("serve", help="JSON-lines requests on stdin, responses on stdout"),
           checkpoint=True, out=False)
    rr = sub.add_parser("rerun", help="repeat a run from its manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", help="write outputs here instead of the recorded directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            with open(args.manifest, encoding="utf-8") as f:
                m = json.load(f)
            command, cfg, paths = m["subcommand"], m["config"], dict(m["paths"])
            unknown = set(cfg) - set(DEFAULTS)
            if command not in COMMANDS or unknown:
                raise ConfigurationError(f"{args.manifest}: not a usable manifest")
            if args.out:
                paths["out"] = os.path.abspath(args.out)
        else:
            command = args.command
            cfg = resolve_config(args.config, args.overrides, args.seed)
            paths = {k: os.path.abspath(getattr(args, k)) for k in ("data", "checkpoint", "out")
                     if getattr(args, k, None)}
            if command == "eval":
                paths["mode"] = args.mode
            if command in ("sft", "eval", "serve-bench", "serve") and "checkpoint" not in paths:
                raise ConfigurationError(f"{command} needs --checkpoint")
        run(command, cfg, paths)
    except ConfigurationError as exc:
        print(f"genrec: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"genrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"genrec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
