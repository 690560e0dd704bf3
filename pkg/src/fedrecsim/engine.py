"""The federated round engine.

Each communication round: the server samples a user batch, broadcasts the
current global model, selected benign clients compute one full-batch BCE
step over their private item sets (with the defense regularizers when the
defense is on) and update their own user embedding locally, selected
malicious clients run their attack plugin, and the server aggregates all
uploaded gradients with the configured aggregator and applies one update.

Per-round client computations are pure functions of the broadcast snapshot
plus per-client state, so they parallelize freely; contributions are
re-ordered by client id before aggregation, which makes results identical
for any worker count.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attacks import MiningAttackClient, MiningState, OracleAttackClient, mining_finalize, mining_observe
from .config import ExperimentConfig
from .data import InteractionDataset, build_dataset, load_interactions
from .defense import AggregatorSpec, aggregate_updates, combine, defended_client_step
from .errors import ConfigError
from .metrics import EvaluationReport, evaluate
from .models import (
    ClientState,
    GlobalModel,
    GradientUpdate,
    apply_update,
    client_loss_and_grads,
    init_model,
    init_user_embeddings,
)
from .rng import substream
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger(__name__)

METRICS_FIELDS = (
    "round", "er_at_k_pct", "hr_at_k_pct", "mean_loss",
    "aggregator", "attack", "defense", "seed",
)


def select_round_users(num_users: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform user sample without replacement, returned in ascending order."""
    if batch > num_users:
        raise ConfigError(f"round batch {batch} exceeds user count {num_users}")
    return np.sort(rng.choice(num_users, size=batch, replace=False))


@dataclass
class RoundLog:
    round_index: int
    selected: np.ndarray
    mean_loss: float
    item_grad_norms: np.ndarray
    wall_time: float
    target_stats: dict = field(default_factory=dict)
    # target_stats: item -> (n_malicious, n_total, dot(agg, mean malicious))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: InteractionDataset
    targets: tuple
    model: GlobalModel
    user_embeddings: np.ndarray
    metrics_rows: list
    eval_reports: list
    round_logs: list
    delta_history: dict

    def final_report(self) -> EvaluationReport:
        return self.eval_reports[-1]


def build_experiment_dataset(config: ExperimentConfig) -> InteractionDataset:
    if config.dataset == "synthetic":
        spec = SyntheticSpec(
            num_users=config.synth_users,
            num_items=config.synth_items,
            zipf_exponent=config.synth_exponent,
            interactions_per_user=config.synth_interactions,
            seed=config.seed,
        )
        records = generate_synthetic(spec)
        num_items = spec.num_items
    else:
        loaded = load_interactions(config.dataset)
        records = loaded.records
        num_items = loaded.num_items
    return build_dataset(records, num_items=num_items, q=config.q, seed=config.seed)


def auto_select_targets(dataset: InteractionDataset, count: int,
                        rng: np.random.Generator) -> tuple:
    """Uniformly random targets among the items with minimal interaction
    count (expanding to the next level when that set is too small)."""
    popularity = dataset.item_popularity
    pool = []
    for level in np.unique(popularity):
        ids = np.where(popularity == level)[0]
        rng.shuffle(ids)
        pool.extend(int(i) for i in ids)
        if len(pool) >= count:
            break
    if len(pool) < count:
        raise ConfigError(f"cannot select {count} targets among {len(pool)} items")
    return tuple(pool[:count])


class FederatedSimulation:
    """Owns the model, the clients, and the round loop for one experiment."""

    def __init__(self, config: ExperimentConfig, dataset: InteractionDataset = None,
                 record_deltas: bool = False, instrument_targets: bool = False):
        config.validate()
        self.config = config
        self.dataset = dataset if dataset is not None else build_experiment_dataset(config)
        self.record_deltas = record_deltas
        self.instrument_targets = instrument_targets

        self.num_benign = self.dataset.num_users
        if config.attack != "none" and config.malicious_ratio > 0:
            self.num_malicious = int(round(
                self.num_benign * config.malicious_ratio / (1.0 - config.malicious_ratio)
            ))
            if self.num_malicious < 1:
                raise ConfigError(
                    "attack enabled but malicious_ratio yields zero malicious users"
                )
        else:
            self.num_malicious = 0
        self.num_users = self.num_benign + self.num_malicious

        self.model = init_model(
            config.model_family,
            self.dataset.num_items,
            config.dim,
            substream(config.seed, "init", "model"),
            dl_layers=config.dl_layers,
            init_scale=config.init_scale,
            mf_score_mode=config.mf_score_mode,
        )
        self.user_embeddings = init_user_embeddings(
            self.num_users, config.dim,
            substream(config.seed, "init", "users"),
            init_scale=config.init_scale,
        )
        self.clients = [
            ClientState(self.user_embeddings[i],
                        role="benign" if i < self.num_benign else "malicious")
            for i in range(self.num_users)
        ]

        if config.target_items:
            bad = [t for t in config.target_items if not 0 <= t < self.dataset.num_items]
            if bad:
                raise ConfigError(f"target ids out of range: {bad}")
            self.targets = tuple(int(t) for t in config.target_items)
        else:
            self.targets = auto_select_targets(
                self.dataset, config.num_targets, substream(config.seed, "targets")
            )

        self.attack_plugins = {}
        for uid in range(self.num_benign, self.num_users):
            if config.attack in ("pieckipe", "pieckuea"):
                self.attack_plugins[uid] = MiningAttackClient(
                    kind=config.attack,
                    target_ids=self.targets,
                    mined_count=config.resolved_mined_count(),
                    mining_rounds=config.mining_rounds,
                    lam=config.lam,
                    uea_batch=config.uea_batch,
                    uea_round_size=config.uea_round_size,
                    joint_targets=(config.multi_target_strategy == "joint"),
                )
            elif config.attack == "oracle":
                self.attack_plugins[uid] = OracleAttackClient(
                    target_ids=self.targets,
                    benign_embeddings_provider=lambda: self.user_embeddings[: self.num_benign],
                )

        self.defense_mining = None
        self.defense_popular = None
        if config.defense_enabled:
            self.defense_mining = {uid: MiningState() for uid in range(self.num_benign)}
            self.defense_popular = {}

        self.aggregator_spec = AggregatorSpec(
            kind=config.aggregator,
            tau=config.norm_bound_tau,
            fraction=config.resolved_trim_fraction(),
            f_count=None if config.f_count < 0 else config.f_count,
            scale_mode=config.robust_scale,
        )

        self.round_logs = []
        self.eval_reports = []
        self.metrics_rows = []
        self.delta_history = {}

    # -- per-client work ----------------------------------------------------

    def _benign_step(self, uid: int, model: GlobalModel):
        cfg = self.config
        items = self.dataset.train_items(uid)
        labels = self.dataset.train_labels(uid)
        user_vec = self.user_embeddings[uid]
        popular = None
        if cfg.defense_enabled:
            popular = self.defense_popular.get(uid)
            if popular is None:
                state = self.defense_mining[uid]
                mining_observe(state, model.item_embeddings)
                popular = mining_finalize(
                    state, cfg.defense_mined_count, mining_rounds=cfg.mining_rounds
                )
                if popular is not None:
                    self.defense_popular[uid] = popular
                    self.defense_mining[uid] = None  # release the snapshot
        if popular is not None:
            loss, item_grads, user_grad, param_grads = defended_client_step(
                model, user_vec, items, labels, popular, cfg.beta, cfg.gamma
            )
        else:
            loss, item_grads, user_grad, param_grads = client_loss_and_grads(
                model, user_vec, items, labels
            )
        update = GradientUpdate(
            item_grads={int(j): item_grads[row] for row, j in enumerate(items)},
            sender_role="benign",
        )
        if param_grads is not None:
            update.weight_grads, update.bias_grads, update.projection_grad = param_grads
        return update, loss, user_grad

    def _client_job(self, uid: int, model: GlobalModel):
        self.clients[uid].times_sampled += 1
        if uid < self.num_benign:
            return self._benign_step(uid, model)
        update = self.attack_plugins[uid].on_selected(model, self.config.eta)
        return update, None, None

    # -- one round ----------------------------------------------------------

    def run_round(self, r: int) -> RoundLog:
        cfg = self.config
        start = time.perf_counter()
        selected = select_round_users(
            self.num_users, min(cfg.round_batch, self.num_users),
            substream(cfg.seed, "round", r),
        )
        model = self.model  # broadcast snapshot, read-only during the round

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = dict(zip(selected, pool.map(
                    lambda uid: self._client_job(uid, model), selected
                )))
        else:
            results = {uid: self._client_job(uid, model) for uid in selected}

        # local personalized-model updates (benign clients only)
        losses = []
        for uid in selected:
            update, loss, user_grad = results[uid]
            if user_grad is not None:
                self.user_embeddings[uid] -= cfg.eta * user_grad
                losses.append(loss)

        # gather contributions in canonical client order
        item_contribs = {}
        tower_contribs = []
        for uid in selected:
            update = results[uid][0]
            if update is None:
                continue
            for j in sorted(update.item_grads):
                item_contribs.setdefault(j, []).append((int(uid), update.item_grads[j]))
            if update.weight_grads is not None:
                tower_contribs.append((int(uid), update))

        final_item_grads = aggregate_updates(self.aggregator_spec, item_contribs)
        agg = GradientUpdate(item_grads=final_item_grads)
        if tower_contribs and model.family == "dl":
            tower_contribs.sort(key=lambda e: e[0])
            w_aggs, b_aggs = [], []
            for layer, w in enumerate(model.weights):
                stack = np.stack([u.weight_grads[layer].ravel() for _, u in tower_contribs])
                w_aggs.append(combine(self.aggregator_spec, stack).reshape(w.shape))
                stack = np.stack([u.bias_grads[layer] for _, u in tower_contribs])
                b_aggs.append(combine(self.aggregator_spec, stack))
            agg.weight_grads = tuple(w_aggs)
            agg.bias_grads = tuple(b_aggs)
            stack = np.stack([u.projection_grad for _, u in tower_contribs])
            agg.projection_grad = combine(self.aggregator_spec, stack)

        target_stats = {}
        if self.instrument_targets:
            for t in self.targets:
                entries = item_contribs.get(t, [])
                mal = [vec for uid, vec in entries
                       if results[uid][0].sender_role == "malicious"]
                if entries and t in final_item_grads:
                    dot = float(final_item_grads[t] @ np.mean(mal, axis=0)) if mal else 0.0
                    target_stats[t] = (len(mal), len(entries), dot)

        before = model.item_embeddings.copy() if self.record_deltas else None
        self.model = apply_update(model, agg, cfg.eta)
        if self.record_deltas:
            self.delta_history[r] = np.linalg.norm(
                self.model.item_embeddings - before, axis=1
            )

        norms = np.zeros(self.dataset.num_items)
        for j, g in final_item_grads.items():
            norms[j] = np.linalg.norm(g)
        return RoundLog(
            round_index=r,
            selected=selected,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            item_grad_norms=norms,
            wall_time=time.perf_counter() - start,
            target_stats=target_stats,
        )

    # -- full run -----------------------------------------------------------

    def evaluate_now(self, r: int) -> EvaluationReport:
        report = evaluate(
            self.model, self.user_embeddings[: self.num_benign], self.dataset,
            self.targets, self.config.k, round_index=r,
        )
        self.eval_reports.append(report)
        return report

    def run(self) -> ExperimentResult:
        cfg = self.config
        for r in range(1, cfg.rounds + 1):
            round_log = self.run_round(r)
            self.round_logs.append(round_log)
            if r % cfg.eval_every == 0 or r == cfg.rounds:
                report = self.evaluate_now(r)
                self.metrics_rows.append({
                    "round": r,
                    "er_at_k_pct": f"{100.0 * report.er_at_k:.4f}",
                    "hr_at_k_pct": f"{100.0 * report.hr_at_k:.4f}",
                    "mean_loss": f"{round_log.mean_loss:.6f}",
                    "aggregator": cfg.aggregator,
                    "attack": cfg.attack,
                    "defense": "regularizers" if cfg.defense_enabled else "none",
                    "seed": cfg.seed,
                })
                log.info(
                    "round %d: ER@%d=%s%% HR@%d=%s%% loss=%s",
                    r, cfg.k, self.metrics_rows[-1]["er_at_k_pct"],
                    cfg.k, self.metrics_rows[-1]["hr_at_k_pct"],
                    self.metrics_rows[-1]["mean_loss"],
                )
        return ExperimentResult(
            config=cfg,
            dataset=self.dataset,
            targets=self.targets,
            model=self.model,
            user_embeddings=self.user_embeddings,
            metrics_rows=self.metrics_rows,
            eval_reports=self.eval_reports,
            round_logs=self.round_logs,
            delta_history=self.delta_history,
        )


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_mining_report_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("round", "item_id", "delta_norm", "true_pop_rank"))
        for r, item, delta, rank in rows:
            writer.writerow((r, item, f"{delta:.8f}", rank))


def run_experiment(config: ExperimentConfig, out_dir=None, dataset=None,
                   record_deltas: bool = False,
                   instrument_targets: bool = False) -> ExperimentResult:
    """Build the dataset, run all rounds, optionally persist metrics.csv."""
    sim = FederatedSimulation(
        config, dataset=dataset, record_deltas=record_deltas,
        instrument_targets=instrument_targets,
    )
    result = sim.run()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(result.metrics_rows, os.path.join(out_dir, "metrics.csv"))
    return result
