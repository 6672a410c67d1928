"""CSV report emission (schema v1, documented in docs/csv-schema.md).

Writers are deterministic: fixed column order, fixed float formatting
(six decimal places), rows in record order.  Re-emitting the same result
produces byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ReportIoError
from .metrics import ScenarioResult

CSV_SCHEMA_VERSION = 1


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _write(path: Path, header: list[str], rows) -> Path:
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise ReportIoError(f"cannot write {path}: {exc}") from exc
    return path


def emit_report(result: ScenarioResult, out_dir: str | Path,
                plot: bool = False) -> list[Path]:
    """Write the CSV set (and optionally a latency plot); returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportIoError(f"cannot create {out}: {exc}") from exc
    paths = []

    paths.append(_write(out / "sa_setups.csv",
        ["pair", "initiator", "mode", "source", "ppk_id",
         "t_sa_init_ms", "t_get_key_ms", "t_ike_auth_ms", "total_ms",
         "created_at_ms", "rekey"],
        ([f"{r['pair'][0]}|{r['pair'][1]}", r["initiator"], r["mode"], r["source"],
          r["ppk_id"] or "", _fmt(r["t_sa_init"]), _fmt(r["t_get_key"]),
          _fmt(r["t_ike_auth"]), _fmt(r["total"]), _fmt(r["created_at"]),
          int(r["rekey"])]
         for r in result.sa_records)))

    paths.append(_write(out / "hop_events.csv",
        ["time_ms", "pair", "hops"],
        ([_fmt(t), f"{pair[0]}|{pair[1]}", hops]
         for t, pair, hops in result.hop_events)))

    paths.append(_write(out / "source_decisions.csv",
        ["time_ms", "pair", "previous", "source", "reason"],
        ([_fmt(d["at"]), f"{d['pair'][0]}|{d['pair'][1]}", d["previous"] or "",
          d["source"], d["reason"]]
         for d in result.decisions)))

    paths.append(_write(out / "packets.csv",
        ["stream", "src", "dst", "sent", "delivered", "via_hub", "direct",
         "decrypt_failures", "replay_errors", "other_errors", "not_delivered"],
        ([s["stream"], s["src"], s["dst"], s["sent"], s["delivered"], s["via_hub"],
          s["direct"], s["decrypt_failures"], s["replay_errors"], s["other_errors"],
          s["not_delivered"]]
         for s in result.stream_stats)))

    paths.append(_write(out / "rekeys.csv",
        ["time_ms", "pair", "old_sa", "new_sa", "initiated_age_s",
         "completed_age_s", "old_ppk_id", "new_ppk_id"],
        ([_fmt(r["at"]), f"{r['tunnel'][0]}|{r['tunnel'][1]}", r["old_sa_id"],
          r["new_sa_id"], _fmt(r["initiated_age_s"]), _fmt(r["completed_age_s"]),
          r["old_ppk_id"] or "", r["new_ppk_id"] or ""]
         for r in result.rekey_records)))

    paths.append(_write(out / "buffers.csv",
        ["time_ms", "node", "source", "available_bits", "reserved_bits"],
        ([_fmt(t), node, source, available, reserved]
         for t, node, source, available, reserved in result.buffer_series)))

    if plot:
        paths.append(_plot_latency(result, out))
    return paths


def _plot_latency(result: ScenarioResult, out: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_key: dict[tuple[str, str], list[float]] = {}
    for record in result.sa_records:
        key = (f"{record['pair'][0]}|{record['pair'][1]}", record["mode"])
        by_key.setdefault(key, []).append(record["total"])
    pairs = sorted({k[0] for k in by_key})
    modes = ["ECDH", "PPK"]
    fig, ax = plt.subplots(figsize=(9, 4.5))
    width = 0.38
    for offset, mode in enumerate(modes):
        means = [sum(by_key.get((p, mode), [0])) / max(len(by_key.get((p, mode), [1])), 1)
                 for p in pairs]
        ax.bar([i + offset * width for i in range(len(pairs))], means,
               width=width, label=mode)
    ax.set_xticks([i + width / 2 for i in range(len(pairs))])
    ax.set_xticklabels(pairs, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean SA setup time (ms)")
    ax.set_title(f"{result.name}: setup latency by pair and mode")
    ax.legend()
    fig.tight_layout()
    path = out / "latency.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
