"""Ranking metrics and the sampled-negative evaluation protocol.

Each evaluated user ranks their held-out target against ``eval_negatives``
items sampled (once, seeded) from outside their full history.  The
candidate order is shuffled per user so the deterministic index tie-break
is unbiased in expectation: an all-equal scorer lands the target at a
uniform rank.  NDCG uses the single-relevant-item reduction (ideal DCG is
1), so NDCG@k = 1/log2(rank+1) when the rank is within the cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import GroupLabels, InteractionDataset, LeaveOneOutSplit, sample_negatives
from .errors import DataError, ProtocolError

KS = (1, 3, 5, 10, 20)


def rank_of_target(scores, target_index: int) -> int:
    """1-based rank: strictly better candidates, then earlier-index ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if not (0 <= target_index < len(scores)):
        raise ValueError(f"target index {target_index} out of range")
    target = scores[target_index]
    greater = int((scores > target).sum())
    tied_before = int(((scores == target) & (np.arange(len(scores)) < target_index)).sum())
    return 1 + greater + tied_before


def ndcg_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / np.log2(rank + 1.0) if rank <= k else 0.0


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 if rank <= k else 0.0


@dataclass(frozen=True)
class MetricReport:
    """NDCG@k / HR@k aggregates for one user population."""

    ndcg: dict[int, float]
    hr: dict[int, float]
    n_users_evaluated: int
    n_skipped: int = 0
    group: str = "overall"
    empty: bool = False


@dataclass(frozen=True)
class UserRecord:
    user: int
    target_item: int
    rank: int


def report_from_ranks(ranks, group: str = "overall", n_skipped: int = 0) -> MetricReport:
    ranks = list(ranks)
    if not ranks:
        return MetricReport(
            ndcg={k: 0.0 for k in KS}, hr={k: 0.0 for k in KS},
            n_users_evaluated=0, n_skipped=n_skipped, group=group, empty=True,
        )
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in KS}
    hr = {k: float(np.mean([hr_at_k(r, k) for r in ranks])) for k in KS}
    return MetricReport(ndcg=ndcg, hr=hr, n_users_evaluated=len(ranks),
                        n_skipped=n_skipped, group=group)


def _eval_candidates(ds: InteractionDataset, user: int, target: int,
                     eval_negatives: int, seed: int):
    """Seeded per-user candidate vector: target + negatives, order shuffled."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1, user]))
    negs = sample_negatives(ds, user, eval_negatives, rng)
    candidates = np.concatenate([[target], negs])
    order = rng.permutation(len(candidates))
    return candidates[order], int(np.flatnonzero(order == 0)[0])


def evaluate(model, split: LeaveOneOutSplit, ds: InteractionDataset, which: str,
             eval_negatives: int = 100, seed: int = 42, max_seq_len: int = 100,
             batch_size: int = 256):
    """Rank each user's held-out target among sampled negatives.

    ``which`` selects the validation protocol (input = train prefix,
    target = validation item) or the test protocol (input = prefix +
    validation item, target = test item).  Returns (MetricReport,
    [UserRecord]) with users processed in ascending id order.
    """
    if which not in ("valid", "test"):
        raise ValueError(f"which must be 'valid' or 'test', got {which!r}")
    if len(split) == 0:
        raise ProtocolError("cannot evaluate an empty split")

    users = split.users
    ranks: list[int] = []
    records: list[UserRecord] = []
    for start in range(0, len(users), batch_size):
        chunk = users[start : start + batch_size]
        seqs, cand_rows, target_pos = [], [], []
        for u in chunk:
            entry = split.entries[u]
            if which == "valid":
                seqs.append(entry.train_prefix)
                target = entry.valid_target
            else:
                seqs.append(entry.train_prefix + [entry.valid_target])
                target = entry.test_target
            cands, tpos = _eval_candidates(ds, u, target, eval_negatives, seed)
            cand_rows.append(cands)
            target_pos.append(tpos)
        o_final = model.final_representations(np.asarray(chunk), seqs, max_seq_len)
        scores = model.candidate_scores(np.asarray(chunk), np.stack(cand_rows), o_final)
        for i, u in enumerate(chunk):
            rank = rank_of_target(scores[i], target_pos[i])
            ranks.append(rank)
            records.append(UserRecord(
                user=u,
                target_item=int(cand_rows[i][target_pos[i]]),
                rank=rank,
            ))
    report = report_from_ranks(ranks, group="overall", n_skipped=split.n_excluded)
    return report, records


def group_report(records, groups: GroupLabels) -> dict[str, MetricReport]:
    """Head/tail splits by the user's flag and by the test target's flag."""
    buckets = {"head_user": [], "tail_user": [], "head_item": [], "tail_item": []}
    for rec in records:
        buckets["head_user" if groups.user_is_head[rec.user] else "tail_user"].append(rec.rank)
        buckets["head_item" if groups.item_is_head[rec.target_item] else "tail_item"].append(rec.rank)
    return {name: report_from_ranks(ranks, group=name) for name, ranks in buckets.items()}


# ---------------------------------------------------------------------------
# Report files

_HEADER = "group\tk\tndcg\thr"


def emit_report(reports, path) -> None:
    """Write the metrics TSV; floats use repr so parsing round-trips exactly.

    Per-report metadata (user counts, empty flags) rides in ``# meta``
    comment lines so the data schema stays plain group/k/ndcg/hr.
    """
    lines = [_HEADER]
    for rep in reports:
        lines.append(f"# meta\t{rep.group}\t{rep.n_users_evaluated}\t{rep.n_skipped}\t{int(rep.empty)}")
        for k in KS:
            lines.append(f"{rep.group}\t{k}\t{rep.ndcg[k]!r}\t{rep.hr[k]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_report_tsv(path) -> list[MetricReport]:
    reports: list[MetricReport] = []
    meta: dict[str, tuple[int, int, bool]] = {}
    data: dict[str, dict[int, tuple[float, float]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != _HEADER:
            raise DataError(f"{path}: unexpected header {first!r}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("# meta\t"):
                _, group, n_users, n_skipped, empty = line.split("\t")
                meta[group] = (int(n_users), int(n_skipped), bool(int(empty)))
                order.append(group)
                continue
            if line.startswith("#"):
                continue
            group, k, ndcg, hr = line.split("\t")
            data.setdefault(group, {})[int(k)] = (float(ndcg), float(hr))
    for group in order:
        n_users, n_skipped, empty = meta[group]
        cells = data.get(group, {})
        if set(cells) != set(KS):
            raise DataError(f"{path}: group {group} missing k values")
        reports.append(MetricReport(
            ndcg={k: cells[k][0] for k in KS},
            hr={k: cells[k][1] for k in KS},
            n_users_evaluated=n_users, n_skipped=n_skipped, group=group, empty=empty,
        ))
    return reports


def format_report_table(reports) -> str:
    """Human-readable metric table, one row per group."""
    header = ["group", "users"] + [f"N@{k}" for k in KS] + [f"H@{k}" for k in KS]
    widths = [max(10, len(h)) for h in header]
    rows = [header]
    for rep in reports:
        if rep.empty:
            row = [rep.group, "0"] + ["-"] * (2 * len(KS))
        else:
            row = [rep.group, str(rep.n_users_evaluated)]
            row += [f"{rep.ndcg[k]:.4f}" for k in KS]
            row += [f"{rep.hr[k]:.4f}" for k in KS]
        rows.append(row)
    out = []
    for row in rows:
        out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(out) + "\n"
