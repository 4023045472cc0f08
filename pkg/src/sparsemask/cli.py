"""Command-line entry point: ``sparsemask search|train|eval|prune|transfer|verify``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .errors import SparseMaskError
from .pruner import PrunedArchitecture, export_architecture, full_architecture, import_architecture, prune
from .searchspace import EncoderSpec, export_gate_csv, import_gate_csv
from .train import Trainer, evaluate, load_data, search
from .transfer import transfer_connectivity
from .verify import format_table, run_checks


def thread_count() -> int:
    raw = os.environ.get("SPARSEMASK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SparseMaskError(f"SPARSEMASK_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise SparseMaskError("SPARSEMASK_THREADS must be >= 1")
    return n


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, search=replace(cfg.search, seed=args.seed), train=replace(cfg.train, seed=args.seed))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path) -> None:
    doc = {"config_digest": cfg.digest(), **cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _data(cfg: RunConfig, args):
    return load_data(cfg, args.cache_dir, workers=thread_count())


def cmd_search(args) -> int:
    cfg = _config(args)
    out = _out(args)
    res = search(cfg, _data(cfg, args), eval_every=args.eval_every)
    digest = cfg.digest()
    _write_config(cfg, out)
    export_gate_csv(res.gates, out / "gates.csv", digest)
    res.metrics.write(out / "metrics.csv")
    if res.arch is None:
        print(f"error: {res.prune_error}", file=sys.stderr)
        return 2
    export_architecture(res.arch, out / "architecture.json")
    kept = res.arch.num_edges
    print(f"searched {len(res.gates)} edges in {res.seconds:.1f}s; kept {kept}, "
          f"pruned {len(res.gates) - kept} at sigma={cfg.search.sigma} (digest {digest})")
    return 0


def cmd_prune(args) -> int:
    cfg = _config(args)
    if not args.gates:
        raise SparseMaskError("prune needs --gates PATH")
    sigma = cfg.search.sigma if args.sigma is None else args.sigma
    gm = import_gate_csv(args.gates)
    arch = prune(gm, sigma, cfg.encoder, cfg.decoder_channels,
                 {"sigma": sigma, "seed": cfg.search.seed, "config_digest": cfg.digest()})
    out = _out(args)
    export_architecture(arch, out / "architecture.json")
    print(f"kept {arch.num_edges}/{len(gm)} edges, stages {arch.kept_stages}")
    return 0


def _arch_or_full(args, cfg: RunConfig):
    if args.arch:
        return import_architecture(args.arch)
    return full_architecture(cfg.encoder, cfg.decoder_channels,
                             {"sigma": cfg.search.sigma, "seed": cfg.train.seed, "config_digest": cfg.digest()})


def cmd_train(args) -> int:
    cfg = _config(args)
    arch = _arch_or_full(args, cfg)
    out = _out(args)
    trainer = Trainer(arch, cfg, _data(cfg, args))
    if args.resume:
        trainer.load(args.resume)
    trainer.run(args.epochs, eval_every=args.eval_every)
    _write_config(cfg, out)
    trainer.save(out / "checkpoint.npz")
    trainer.metrics.write(out / "metrics.csv")
    print(f"trained {trainer.epoch} epochs, {trainer.net.num_parameters()} parameters, "
          f"val mIoU {trainer.metrics.last('val', 'miou')} (digest {cfg.digest()})")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise SparseMaskError("eval needs --checkpoint PATH")
    with np.load(args.checkpoint, allow_pickle=False) as z:
        arch = PrunedArchitecture.from_dict(json.loads(str(z["meta/arch"])))
    data = _data(cfg, args)
    trainer = Trainer(arch, cfg, data)
    trainer.load(args.checkpoint)
    scores = evaluate(trainer.net, data.val_x, data.val_y, cfg)
    doc = {"config_digest": cfg.digest(), "checkpoint": str(args.checkpoint), **scores}
    if args.out:
        (_out(args) / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    if not args.arch:
        raise SparseMaskError("transfer needs --arch PATH")
    arch = import_architecture(args.arch)
    if args.target:
        doc = json.loads(Path(args.target).read_text())
        target = EncoderSpec.from_dict(doc.get("encoder", doc))
    else:
        target = cfg.encoder
    res = transfer_connectivity(arch, target)
    res.arch.meta["config_digest"] = cfg.digest()
    print(f"{'source stage':>12}  {'stride':>6}  target stage")
    for i, j in res.stage_map.items():
        dest = "DROPPED" if j is None else str(j)
        if i in res.decoder_map and res.decoder_map[i] is None and j is not None:
            dest += " (pruned)"
        print(f"{i:>12}  {arch.encoder_spec.stride(i):>6}  {dest}")
    print(f"edges {arch.num_edges} -> {res.arch.num_edges}")
    if args.out:
        export_architecture(res.arch, _out(args) / "architecture.json")
    return 0


def cmd_verify(args) -> int:
    results = run_checks(seed=args.seed or 0)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval, "prune": cmd_prune,
            "transfer": cmd_transfer, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsemask", description="Sparse connectivity search for dense prediction.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="run config JSON (defaults apply to omitted fields)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="override search and train seeds")
    p.add_argument("--arch", help="architecture JSON (train, transfer)")
    p.add_argument("--gates", help="gate CSV (prune)")
    p.add_argument("--sigma", type=float, help="pruning threshold (prune)")
    p.add_argument("--target", help="target encoder JSON, or a config holding one (transfer)")
    p.add_argument("--checkpoint", help="checkpoint .npz (eval)")
    p.add_argument("--resume", help="checkpoint to resume from (train)")
    p.add_argument("--epochs", type=int, help="run at most this many more epochs (train)")
    p.add_argument("--eval-every", type=int, default=1, help="validation interval in epochs")
    p.add_argument("--cache-dir", help="dataset cache directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=thread_count()):
            return COMMANDS[args.command](args)
    except (SparseMaskError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
