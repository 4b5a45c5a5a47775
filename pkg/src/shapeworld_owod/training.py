"""Incremental open-world training: per-task sessions, exemplar replay,
checkpointing, and the Gaussian-statistics alternation.

Each optimizer step runs the two-phase procedure: the composite loss is
computed against frozen Gaussian statistics, parameters update, and only then
the statistics blend in this step's matched layer-n embeddings. The class
head is fixed at the full vocabulary width; classes outside the task's known
set are masked from the loss and from query-selection ranking, which is what
makes the head grow-free across tasks.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .detector import build_detector
from .matching import detection_loss
from .objectness import GaussianStats

PHASE_CODES = {"train": 0, "finetune": 1}


@dataclass(frozen=True)
class TrainSession:
    task_id: int
    phase: str            # "train" | "finetune"
    epochs: int
    lr: float
    lr_drop: int
    batch_size: int
    seed: int

    def validate(self):
        if self.phase not in PHASE_CODES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "finetune" and self.task_id < 2:
            raise ValueError("finetune sessions only exist from task 2 on")


def session_for(cfg, task_id: int, phase: str) -> TrainSession:
    t = cfg.train
    if phase == "train":
        session = TrainSession(task_id, phase, t.epochs, t.lr, t.lr_drop, t.batch_size, t.seed)
    else:
        session = TrainSession(task_id, phase, t.finetune_epochs, t.lr,
                               t.finetune_lr_drop, t.batch_size, t.seed)
    session.validate()
    return session


def new_model_and_stats(cfg):
    model = build_detector(cfg.model, cfg.tdqi, seed=cfg.train.seed)
    stats = GaussianStats(cfg.model.embed_dim, momentum=cfg.objectness.momentum,
                          cov_reg=cfg.objectness.cov_reg, diagonal=cfg.objectness.diagonal)
    return model, stats


def batch_tensors(dataset, records, dtype=torch.float32):
    images = torch.from_numpy(
        np.stack([dataset.image(r["scene_id"]) for r in records])[:, None]).to(dtype)
    targets = []
    for r in records:
        objs = r["objects"]
        targets.append({
            "classes": torch.tensor([int(o["class"]) for o in objs], dtype=torch.int64),
            "boxes": torch.tensor([o["box"] for o in objs], dtype=dtype).reshape(len(objs), 4),
        })
    return images, targets


# ---------------------------------------------------------------------------
# exemplar replay
# ---------------------------------------------------------------------------

def build_exemplar_store(dataset, task_id: int, per_class: int, seed: int) -> dict:
    """Pick up to `per_class` training scenes per introduced class, uniformly
    at random under the seed. Store maps class -> list of scene records."""
    task = dataset.task(task_id)
    records = dataset.records(task_id, "train")
    store = {}
    for c in task.introduced_classes:
        candidates = [r for r in records if any(int(o["class"]) == c for o in r["objects"])]
        rng = np.random.default_rng(np.random.SeedSequence((seed, task_id, int(c), 424242)))
        take = min(per_class, len(candidates))
        chosen = sorted(rng.choice(len(candidates), size=take, replace=False).tolist())
        store[int(c)] = [candidates[i] for i in chosen]
    return store


def store_records(stores) -> list:
    """Merge per-task exemplar stores into a deduplicated record list."""
    seen = {}
    for store in stores:
        for c in sorted(store):
            for record in store[c]:
                seen.setdefault(record["scene_id"], record)
    return [seen[k] for k in sorted(seen)]


def save_store(store: dict, path):
    Path(path).write_text(json.dumps({str(k): v for k, v in store.items()}, indent=2))


def load_store(path) -> dict:
    data = json.loads(Path(path).read_text())
    return {int(k): v for k, v in data.items()}


# ---------------------------------------------------------------------------
# the session loop
# ---------------------------------------------------------------------------

def _epoch_rng(session: TrainSession, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        (session.seed, session.task_id, PHASE_CODES[session.phase], epoch)))


def _format(value) -> str:
    if torch.is_tensor(value):
        value = value.detach()
    return repr(float(value))


def train_session(model, stats, dataset, session: TrainSession, cfg, run_dir,
                  extra_records=None, resume: bool = False):
    """Run one training session; returns per-epoch history.

    extra_records: exemplar scenes appended to the task's train split
    (fine-tuning). Checkpoints: `latest` after every epoch plus a final
    `task{t}_{phase}_final`; loss CSV rows per step and layer.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    torch.set_num_threads(cfg.train.threads)
    torch.manual_seed(session.seed)

    task = dataset.task(session.task_id)
    records = list(dataset.records(session.task_id, "train"))
    if extra_records:
        records = records + [r for r in extra_records if r["scene_id"] not in
                             {x["scene_id"] for x in records}]
    known = list(task.known_classes)
    config_hash = cfg.config_hash()

    optimizer = torch.optim.AdamW(model.parameters(), lr=session.lr,
                                  betas=(0.9, 0.999), weight_decay=cfg.train.weight_decay)

    start_epoch = 0
    csv_path = run_dir / f"loss_{session.phase}.csv"
    history_path = run_dir / f"history_{session.phase}.json"
    history = []
    if resume:
        manifest = load_checkpoint(ckpt_dir / "latest", model, stats, optimizer,
                                   expect_config_hash=config_hash)
        if manifest["task_id"] != session.task_id or manifest["phase"] != session.phase:
            raise RuntimeError(
                f"latest checkpoint is task {manifest['task_id']}/{manifest['phase']}, "
                f"cannot resume task {session.task_id}/{session.phase}")
        start_epoch = manifest["epoch"] + 1
        if history_path.exists():
            history = json.loads(history_path.read_text())[:start_epoch]
    else:
        csv_path.write_text("step,layer,l_class,l_l1,l_giou,l_obj\n")

    model.train()
    step = start_epoch * ((len(records) + session.batch_size - 1) // session.batch_size)
    for epoch in range(start_epoch, session.epochs):
        lr_now = session.lr * (0.1 if epoch >= session.lr_drop else 1.0)
        for group in optimizer.param_groups:
            group["lr"] = lr_now
        order = _epoch_rng(session, epoch).permutation(len(records))
        epoch_total = 0.0
        epoch_batches = 0
        csv_lines = []
        for start in range(0, len(order), session.batch_size):
            chunk = [records[i] for i in order[start:start + session.batch_size]]
            images, targets = batch_tensors(dataset, chunk)
            outputs = model(images, stats=stats, etop=cfg.etop, known_class_ids=known)
            active = stats.step_count >= cfg.objectness.warmup_updates
            breakdown = detection_loss(
                outputs, targets, cfg.loss, cfg.etop, stats, known,
                objectness_active=active,
                ema_source_layer=cfg.objectness.ema_source_layer)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            if cfg.train.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
            optimizer.step()
            if breakdown.ema_embeddings is not None and breakdown.ema_embeddings.shape[0] >= 2:
                stats.ema_update(breakdown.ema_embeddings)

            for label in list(breakdown.layers):
                terms = breakdown.layers[label]
                csv_lines.append(",".join([
                    str(step), str(label),
                    _format(terms.get("l_class", 0.0)),
                    _format(terms.get("l_l1", 0.0)),
                    _format(terms.get("l_giou", 0.0)),
                    _format(terms["l_obj"]) if "l_obj" in terms else "",
                ]))
            epoch_total += float(breakdown.total.detach())
            epoch_batches += 1
            step += 1
        with csv_path.open("a") as fh:
            fh.write("\n".join(csv_lines) + "\n")
        history.append({"epoch": epoch, "mean_total": epoch_total / max(epoch_batches, 1),
                        "lr": lr_now, "stats_steps": stats.step_count})
        history_path.write_text(json.dumps(history, indent=2))

        rng_state = None  # epoch boundaries re-derive data order from seeds
        save_checkpoint(ckpt_dir / "latest", model, stats, optimizer,
                        config_hash=config_hash, task_id=session.task_id,
                        phase=session.phase, epoch=epoch, numpy_rng_state=rng_state)
        if cfg.train.keep_epoch_checkpoints:
            save_checkpoint(ckpt_dir / f"{session.phase}_epoch{epoch:03d}", model, stats,
                            optimizer, config_hash=config_hash, task_id=session.task_id,
                            phase=session.phase, epoch=epoch)

    final = ckpt_dir / f"task{session.task_id}_{session.phase}_final"
    save_checkpoint(final, model, stats, optimizer, config_hash=config_hash,
                    task_id=session.task_id, phase=session.phase,
                    epoch=session.epochs - 1)
    return history


def run_task(cfg, dataset, task_id: int, run_root, resume: bool = False):
    """Train task t (and its fine-tuning session for t >= 2).

    Task 1 starts from a fresh model; later tasks continue from the previous
    task's final checkpoint. Returns the path of the final checkpoint.
    """
    run_root = Path(run_root)
    task_dir = run_root / f"task{task_id}"
    model, stats = new_model_and_stats(cfg)
    config_hash = cfg.config_hash()

    if task_id > 1:
        prev_dir = run_root / f"task{task_id - 1}" / "checkpoints"
        prev_final = prev_dir / f"task{task_id - 1}_finetune_final"
        if not prev_final.exists():
            prev_final = prev_dir / f"task{task_id - 1}_train_final"
        if not prev_final.exists():
            raise RuntimeError(f"no final checkpoint for task {task_id - 1} under {prev_dir}")
        load_checkpoint(prev_final, model, stats, expect_config_hash=config_hash)

    session = session_for(cfg, task_id, "train")
    train_session(model, stats, dataset, session, cfg, task_dir, resume=resume)

    store = build_exemplar_store(dataset, task_id, cfg.train.exemplars_per_class,
                                 cfg.train.seed)
    save_store(store, task_dir / "exemplars.json")

    final = task_dir / "checkpoints" / f"task{task_id}_train_final"
    if task_id >= 2:
        stores = [load_store(run_root / f"task{t}" / "exemplars.json")
                  for t in range(1, task_id)]
        extra = store_records(stores)
        ft_session = session_for(cfg, task_id, "finetune")
        train_session(model, stats, dataset, ft_session, cfg, task_dir,
                      extra_records=extra)
        final = task_dir / "checkpoints" / f"task{task_id}_finetune_final"
    return final
