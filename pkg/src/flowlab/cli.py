"""Command-line entry points: corpus generation, diffusion pretraining,
flow fine-tuning, sampling, evaluation, and diagnostics.

Every command derives all randomness from the config seed (plus explicit
--seed overrides), exits 0 on success, and reports failures as one
machine-parseable "category: message" line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import diagnose as diagnose_mod
from . import metrics as metrics_mod
from .checkpoint import (
    CheckpointError,
    ConfigError,
    RunConfig,
    load_checkpoint,
    save_checkpoint,
)
from .denoiser import Denoiser, DenoiserConfig, PredTarget
from .sample import PredTargetError, SampleRequest, SamplerKind, sample_batch, trajectory_to_csv
from .schedule import FlowTimeGrid, sqrt_noise_schedule
from .textspace import SPECIALS, Vocab, pack_batch
from .train import (
    DiffusionTrainer,
    FlowTrainer,
    TrainConfig,
    train_loop,
)

SAMPLER_FLAGS = {
    "flow-avg": SamplerKind.FLOW_AVG,
    "flow-instant": SamplerKind.FLOW_INSTANT,
    "diffusion": SamplerKind.DIFFUSION_ANCESTRAL,
}


class UsageError(ValueError):
    pass


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig()


def _train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        lr=t.lr, batch_size=t.batch_size, epochs=t.epochs,
        warmup_steps=t.warmup_steps, dropout=t.dropout, ema_decay=t.ema_decay,
        flow_steps=t.flow_steps, reg_rate=t.reg_rate, loss_mode=t.loss_mode,
        pred_target=t.pred_target, time_strategy=t.time_strategy,
        logit_mu=t.logit_mu, logit_sigma=t.logit_sigma, grad_clip=t.grad_clip,
        seed=seed,
    )


def _load_data(cfg: RunConfig):
    vocab = Vocab.load(cfg.data.vocab)
    train = corpus_mod.load_jsonl(cfg.data.train)
    return vocab, train


def cmd_corpus(args) -> int:
    cfg = _load_config(args)
    c = cfg.corpus
    seed = cfg.seed if args.seed is None else args.seed
    records = corpus_mod.gen_task(c.task, c.n, (c.len_min, c.len_max), c.vocab_size, seed)
    train, valid, test = corpus_mod.split(records, tuple(c.fractions), seed)
    out_dir = Path(args.out or c.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = Vocab(SPECIALS + corpus_mod.content_alphabet(c.vocab_size))
    vocab.save(out_dir / "vocab.txt")
    corpus_mod.save_jsonl(out_dir / "train.jsonl", train)
    corpus_mod.save_jsonl(out_dir / "valid.jsonl", valid)
    corpus_mod.save_jsonl(out_dir / "test.jsonl", test)
    print(f"corpus: wrote {len(train)}/{len(valid)}/{len(test)} pairs to {out_dir}")
    return 0


def _model_config(cfg: RunConfig, pred_target: str) -> DenoiserConfig:
    m = cfg.model
    return DenoiserConfig(
        embed_dim=m.embed_dim, hidden_dim=m.hidden_dim, n_layers=m.n_layers,
        n_heads=m.n_heads, max_len=m.max_len, time_rescale=m.time_rescale,
        pred_target=pred_target,
    )


def _open_log(args, out_path):
    log_path = getattr(args, "log", None) or (str(out_path) + ".log")
    return open(log_path, "w", encoding="utf-8", newline="\n"), log_path


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    vocab, train_recs = _load_data(cfg)
    src_ids, tgt_ids = pack_batch(vocab, train_recs, cfg.data.src_len, cfg.data.tgt_len)

    from .textspace import EmbeddingTable
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(len(vocab), cfg.model.embed_dim, rng)
    model = Denoiser(_model_config(cfg, PredTarget.Z0), rng)
    sched = sqrt_noise_schedule(cfg.diffusion_steps)
    tcfg = _train_config(cfg, seed)

    log_fh, log_path = _open_log(args, args.out)
    try:
        trainer = DiffusionTrainer(model, table, sched, tcfg,
                                   log_sink=lambda line: print(line, file=log_fh))
        history = train_loop(trainer, src_ids, tgt_ids, tcfg.epochs, tcfg.batch_size)
    finally:
        log_fh.close()
    save_checkpoint(
        args.out, model, table, trainer.ema, vocab,
        trained_as="diffusion", src_len=cfg.data.src_len, tgt_len=cfg.data.tgt_len,
        train_step=trainer.step_count, seed=seed,
        diffusion_steps=cfg.diffusion_steps,
    )
    print(f"pretrain: {trainer.step_count} steps, final total {history[-1].total:.4g}, "
          f"checkpoint {args.out}, log {log_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    vocab, train_recs = _load_data(cfg)
    src_ids, tgt_ids = pack_batch(vocab, train_recs, cfg.data.src_len, cfg.data.tgt_len)

    teacher = load_checkpoint(args.teacher, vocab)
    # Student starts as a copy of the teacher; the teacher stays frozen as
    # the regularization reference.
    student_cfg = DenoiserConfig(
        **{**teacher.model.config.to_dict(), "pred_target": cfg.train.pred_target}
    )
    student = Denoiser(student_cfg, np.random.default_rng(seed))
    student.load_state(teacher.model.state_arrays())
    from .textspace import EmbeddingTable
    table = EmbeddingTable.from_array(teacher.table.array.copy())

    grid = FlowTimeGrid(cfg.train.flow_steps, cfg.model.time_rescale)
    tcfg = _train_config(cfg, seed)
    log_fh, log_path = _open_log(args, args.out)
    try:
        trainer = FlowTrainer(student, table, teacher.model, grid, tcfg,
                              log_sink=lambda line: print(line, file=log_fh))
        history = train_loop(trainer, src_ids, tgt_ids, tcfg.epochs, tcfg.batch_size)
    finally:
        log_fh.close()
    save_checkpoint(
        args.out, student, table, trainer.ema, vocab,
        trained_as="flow", src_len=cfg.data.src_len, tgt_len=cfg.data.tgt_len,
        train_step=trainer.step_count, seed=seed,
        diffusion_steps=teacher.header.get("diffusion_steps"),
        flow_steps=cfg.train.flow_steps,
    )
    print(f"finetune: {trainer.step_count} steps, final total {history[-1].total:.4g}, "
          f"checkpoint {args.out}, log {log_path}")
    return 0


def _resolve_sampler(bundle, kind_flag: str, steps: int | None):
    header = bundle.header
    kind = SAMPLER_FLAGS[kind_flag]
    if kind == SamplerKind.DIFFUSION_ANCESTRAL:
        if header.get("trained_as") != "diffusion":
            raise PredTargetError(
                "diffusion sampler requires a checkpoint trained under the diffusion objective"
            )
        chain = header.get("diffusion_steps")
        if steps is None:
            steps = chain
        if steps != chain:
            raise UsageError(
                f"diffusion sampler runs exactly {chain} steps (respacing unsupported)"
            )
        proc = sqrt_noise_schedule(chain)
    else:
        if steps is None:
            steps = 5
        proc = FlowTimeGrid(steps, header["model"]["time_rescale"])
    return kind, steps, proc


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    vocab = Vocab.load(args.vocab or cfg.data.vocab)
    bundle = load_checkpoint(args.ckpt, vocab)
    model, table = (bundle.ema_view() if args.ema else (bundle.model, bundle.table))
    records = corpus_mod.load_jsonl(args.infile)
    if not records:
        raise UsageError(f"{args.infile}: no records to sample")

    kind, steps, proc = _resolve_sampler(bundle, args.sampler, args.steps)
    src_len = bundle.header["src_len"]
    tgt_len = args.target_len or bundle.header["tgt_len"]
    mbr_n = max(1, args.mbr)

    from .textspace import encode_pair
    encoded = [encode_pair(vocab, r.src, r.trg, src_len, tgt_len)[0] for r in records]

    pools = [[] for _ in records]
    batch = max(1, args.batch)
    record_first = bool(args.record_trajectory)
    for cand in range(mbr_n):
        for lo in range(0, len(records), batch):
            chunk = encoded[lo:lo + batch]
            reqs = [
                SampleRequest(
                    src, tgt_len, steps, kind,
                    record_trajectory=record_first and cand == 0 and lo == 0 and i == 0,
                    seed=metrics_mod._candidate_seed(seed, lo + i, cand),
                )
                for i, src in enumerate(chunk)
            ]
            ids, trajs, _ = sample_batch(model, table, proc, reqs)
            for i, out in enumerate(ids):
                pools[lo + i].append(vocab.decode(out))
            if record_first and cand == 0 and lo == 0 and trajs[0] is not None:
                Path(args.record_trajectory).write_text(
                    trajectory_to_csv(trajs[0]), encoding="utf-8"
                )

    import json
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for rec, pool in zip(records, pools):
            obj = {"src": rec.src, "trg": pool[0]}
            if mbr_n > 1:
                obj["cands"] = pool
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    print(f"sample: wrote {len(records)} generations ({kind}, steps={steps}, "
          f"mbr={mbr_n}) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    import json
    hyp_lines = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    pools = []
    for lineno, line in enumerate(hyp_lines, start=1):
        if not line.strip():
            continue
        obj = json.loads(line)
        cands = obj.get("cands", [obj.get("trg", "")])
        pools.append([c.split() for c in cands])
    refs = [r.trg.split() for r in corpus_mod.load_jsonl(args.ref)]
    if len(pools) != len(refs):
        raise UsageError(f"hypothesis count {len(pools)} != reference count {len(refs)}")
    n_max = args.mbr or min(len(p) for p in pools)
    reports = metrics_mod.sweep_from_pool(pools, refs, n_max)
    csv_text = metrics_mod.reports_to_csv(reports)
    Path(args.out).write_text(csv_text, encoding="utf-8")
    last = reports[-1]
    print(f"eval: n={last.mbr_n} bleu={last.bleu:.4f} rouge_l={last.rouge_l:.4f} "
          f"dist1={last.dist1:.4f} ({last.n_samples} samples) -> {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    vocab = Vocab.load(args.vocab or cfg.data.vocab)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    wrote = []
    if args.grad_log:
        summary = diagnose_mod.grad_norm_trace(args.grad_log)
        path = out_dir / "gradnorms.csv"
        lines = ["step,grad_norm"] + [f"{i+1},{v:.8g}" for i, v in enumerate(summary.series)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"grad norms: mean={summary.mean:.4g} p95={summary.p95:.4g} "
              f"max={summary.max:.4g}")
        wrote.append(path)

    needs_models = args.quartiles or args.straightness or args.timing
    if needs_models:
        if not (args.diffusion and args.flow):
            raise UsageError("--quartiles/--straightness/--timing need --diffusion and --flow checkpoints")
        dbun = load_checkpoint(args.diffusion, vocab)
        fbun = load_checkpoint(args.flow, vocab)
        probe = corpus_mod.load_jsonl(args.probe)
        if not probe:
            raise UsageError(f"{args.probe}: empty probe set")
        src_len, tgt_len = dbun.header["src_len"], dbun.header["tgt_len"]
        sched = sqrt_noise_schedule(dbun.header["diffusion_steps"])
        grid = FlowTimeGrid(fbun.header.get("flow_steps") or cfg.train.flow_steps,
                            fbun.header["model"]["time_rescale"])

        if args.quartiles:
            limit = min(len(probe), 512)
            src_ids, tgt_ids = pack_batch(vocab, probe[:limit], src_len, tgt_len)
            drow, frow = diagnose_mod.quartile_report(
                dbun.model, dbun.table, sched, fbun.model, fbun.table, grid,
                src_ids, tgt_ids, seed=seed,
                diff_vocab_hash=dbun.header["vocab_hash"],
                flow_vocab_hash=fbun.header["vocab_hash"],
            )
            path = out_dir / "quartiles.csv"
            path.write_text(
                diagnose_mod.quartiles_to_csv({"diffusion": drow, "flow": frow}),
                encoding="utf-8",
            )
            print(f"quartiles diffusion: {['%.3g' % v for v in drow]}")
            print(f"quartiles flow:      {['%.3g' % v for v in frow]}")
            wrote.append(path)

        from .textspace import encode_pair
        prompts = [encode_pair(vocab, r.src, r.trg, src_len, tgt_len)[0]
                   for r in probe[: args.straightness or 0]]

        if args.straightness:
            _, fstats = diagnose_mod.straightness_report(
                fbun.model, fbun.table, grid, SamplerKind.FLOW_AVG,
                grid.num_steps, prompts, tgt_len, seed=seed)
            _, dstats = diagnose_mod.straightness_report(
                dbun.model, dbun.table, sched, SamplerKind.DIFFUSION_ANCESTRAL,
                sched.num_steps, prompts, tgt_len, seed=seed)
            path = out_dir / "straightness.csv"
            path.write_text(
                diagnose_mod.straightness_to_csv({"flow": fstats, "diffusion": dstats}),
                encoding="utf-8",
            )
            print(f"straightness flow mean={fstats[0]:.4f} diffusion mean={dstats[0]:.4f}")
            wrote.append(path)

        if args.timing:
            probe_src = encode_pair(vocab, probe[0].src, probe[0].trg, src_len, tgt_len)[0]
            timing = {}
            for steps in (1, 3, 5):
                timing[(SamplerKind.FLOW_AVG, steps)] = diagnose_mod.time_sampler(
                    fbun.model, fbun.table, FlowTimeGrid(steps, grid.rescale_max),
                    SamplerKind.FLOW_AVG, steps, batch=args.batch, repeats=args.repeats,
                    src_ids=probe_src, target_len=tgt_len, seed=seed)
            timing[(SamplerKind.DIFFUSION_ANCESTRAL, sched.num_steps)] = diagnose_mod.time_sampler(
                dbun.model, dbun.table, sched, SamplerKind.DIFFUSION_ANCESTRAL,
                sched.num_steps, batch=args.batch, repeats=args.repeats,
                src_ids=probe_src, target_len=tgt_len, seed=seed)
            path = out_dir / "timing.csv"
            path.write_text(diagnose_mod.timing_to_csv(timing), encoding="utf-8")
            for (kind, steps), secs in timing.items():
                print(f"timing {kind} steps={steps}: {secs * 1e3:.3f} ms/sample")
            wrote.append(path)

    if not wrote:
        raise UsageError("nothing to do: pass --grad-log, --quartiles, --straightness, or --timing")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowlab",
                                description="few-step seq2seq text generation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")

    sp = sub.add_parser("corpus", help="generate a synthetic task corpus")
    common(sp)
    sp.add_argument("--out", default=None, help="output directory")
    sp.set_defaults(fn=cmd_corpus)

    sp = sub.add_parser("pretrain", help="diffusion pretraining")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", default=None, help="training log path")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="straight-flow fine-tuning from a teacher checkpoint")
    common(sp)
    sp.add_argument("--teacher", required=True, help="diffusion checkpoint path")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", default=None, help="training log path")
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("sample", help="generate targets for a JSONL input")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab", default=None)
    sp.add_argument("--sampler", choices=sorted(SAMPLER_FLAGS), default="flow-avg")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--mbr", type=int, default=1, help="candidates per item")
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--target-len", type=int, default=None)
    sp.add_argument("--ema", action="store_true", help="sample with EMA weights")
    sp.add_argument("--record-trajectory", default=None, help="CSV path for the first item")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("eval", help="metric sweep over generated candidates")
    common(sp)
    sp.add_argument("--hyp", required=True, help="generated JSONL")
    sp.add_argument("--ref", required=True, help="reference JSONL")
    sp.add_argument("--out", required=True, help="metrics CSV path")
    sp.add_argument("--mbr", type=int, default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("diagnose", help="checkpoint diagnostics")
    common(sp)
    sp.add_argument("--diffusion", default=None, help="diffusion checkpoint")
    sp.add_argument("--flow", default=None, help="flow checkpoint")
    sp.add_argument("--probe", default=None, help="probe JSONL")
    sp.add_argument("--vocab", default=None)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--quartiles", action="store_true")
    sp.add_argument("--straightness", type=int, default=0, metavar="N_PROMPTS")
    sp.add_argument("--timing", action="store_true")
    sp.add_argument("--grad-log", default=None)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(fn=cmd_diagnose)
    return p


def _categorize(exc: BaseException) -> str:
    from .checkpoint import VocabHashError
    if isinstance(exc, ConfigError):
        return "config-error"
    if isinstance(exc, (VocabHashError, CheckpointError)):
        return "checkpoint-error"
    if isinstance(exc, PredTargetError):
        return "sampler-error"
    if isinstance(exc, FileNotFoundError):
        return "io-error"
    if isinstance(exc, (UsageError, ValueError)):
        return "usage-error"
    return "internal-error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 - single reporting point
        print(f"{_categorize(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
