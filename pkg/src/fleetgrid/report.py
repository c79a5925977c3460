"""Episode comparison tables, delimited time series, and figure rendering.

Currency amounts are carried as integer micro-units once they enter this
module, so sums over steps, buses, and modes are exact; only the final
rendering turns them back into decimal strings.  Physical quantities
(energy, time, prices as rates) stay floating point.
"""

import csv
import math
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .rhsim import SimReport

MICRO = 10 ** 6


def to_micro(amount: float) -> int:
    """Currency -> integer micro-units (half away from zero)."""
    if not math.isfinite(amount):
        raise ValueError(f"cannot represent {amount!r} in micro-units")
    return int(math.floor(abs(amount) * MICRO + 0.5)) * (1 if amount >= 0 else -1)


def micro_str(m: int) -> str:
    """Exact decimal rendering of an integer micro-unit amount."""
    sign = "-" if m < 0 else ""
    units, frac = divmod(abs(int(m)), MICRO)
    return f"{sign}{units}.{frac:06d}"


def _mean_lmp_by_step(rep: SimReport) -> dict:
    by_step = defaultdict(list)
    for bus, t, price in rep.lmp:
        by_step[t].append(price)
    return {t: sum(v) / len(v) for t, v in sorted(by_step.items())}


def _total_by_step(entries) -> dict:
    out = defaultdict(float)
    for _, t, mw in entries:
        out[t] += mw
    return dict(sorted(out.items()))


def mode_summary(rep: SimReport, step_seconds: float) -> dict:
    """One episode as a JSON-ready record; currency as exact decimals."""
    hours = step_seconds / 3600.0
    mean_time_h = (None if rep.mean_customer_time_steps is None
                   else rep.mean_customer_time_steps * hours)
    gen = to_micro(rep.generation_cost)
    bill = to_micro(rep.tso_expenditure)
    return {
        "mode": rep.mode,
        "aborted": rep.aborted,
        "error": rep.error,
        "steps": rep.steps,
        "fleet_size": rep.fleet_size,
        "customers_served": rep.served,
        "customers_dropped": rep.dropped,
        "customers_in_transit": rep.in_transit,
        "mean_customer_time_h": mean_time_h,
        "fleet_energy_mwh": rep.vehicle_energy_mwh,
        "fleet_charging_mwh": rep.vehicle_charge_mwh,
        "shed_mwh": rep.shed_mwh,
        "mean_lmp_per_mwh": rep.mean_lmp,
        "generation_cost": micro_str(gen),
        "fleet_electricity_bill": micro_str(bill),
        "combined_expenditure": micro_str(gen + bill),
    }


# rows mirror the headline episode metrics: time, energy, money, prices
_ROWS = (
    ("mean customer time", "h", "mean_customer_time_h"),
    ("fleet energy drawn", "MWh", "fleet_energy_mwh"),
    ("fleet charging energy", "MWh", "fleet_charging_mwh"),
    ("load shed", "MWh", "shed_mwh"),
    ("mean price", "$/MWh", "mean_lmp_per_mwh"),
    ("generation cost", "$", "generation_cost"),
    ("fleet electricity bill", "$", "fleet_electricity_bill"),
    ("combined expenditure", "$", "combined_expenditure"),
    ("customers served", "", "customers_served"),
    ("customers dropped", "", "customers_dropped"),
)


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def comparison_rows(reports, step_seconds: float) -> list:
    """(label, unit, {mode: rendered cell}) per metric, modes in run order."""
    summaries = [mode_summary(r, step_seconds) for r in reports]
    rows = []
    for label, unit, key in _ROWS:
        rows.append((label, unit,
                     {s["mode"]: _cell(s[key]) for s in summaries}))
    return rows


def format_table(reports, step_seconds: float) -> str:
    """Plain aligned text table, one column per simulated mode."""
    modes = [r.mode for r in reports]
    rows = comparison_rows(reports, step_seconds)
    head = ["metric", "unit"] + modes
    body = [[label, unit] + [cells[m] for m in modes]
            for label, unit, cells in rows]
    widths = [max(len(str(line[i])) for line in [head] + body)
              for i in range(len(head))]
    def fmt(line):
        return "  ".join(str(v).ljust(w) for v, w in zip(line, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(head), rule] + [fmt(b) for b in body]) + "\n"


def write_table_csv(reports, step_seconds: float, path) -> None:
    modes = [r.mode for r in reports]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "unit"] + modes)
        for label, unit, cells in comparison_rows(reports, step_seconds):
            w.writerow([label, unit] + [cells[m] for m in modes])


def write_timeseries_csv(reports, path) -> None:
    """Long-format per-step series for every mode: one row per observation."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "series", "key", "step", "value"])
        for rep in reports:
            for bus, t, price in rep.lmp:
                w.writerow([rep.mode, "lmp_per_mwh", bus, t, repr(price)])
            for bus, t, mw in rep.exog_load:
                w.writerow([rep.mode, "exogenous_load_mw", bus, t, repr(mw)])
            for bus, t, mw in rep.vehicle_load:
                w.writerow([rep.mode, "fleet_load_mw", bus, t, repr(mw)])
            for bus, t, mw in rep.shed:
                w.writerow([rep.mode, "shed_mw", bus, t, repr(mw)])
            for i, n in enumerate(rep.outstanding_per_step, start=1):
                w.writerow([rep.mode, "customers_waiting", "", i, n])
            for i, n in enumerate(rep.served_per_step, start=1):
                w.writerow([rep.mode, "customers_served", "", i, n])


_MODE_STYLE = {
    "baseline": dict(color="#777777", linestyle="--"),
    "uncoordinated": dict(color="#c44e52", linestyle="-"),
    "coordinated": dict(color="#4c72b0", linestyle="-"),
}


def _style(mode):
    return _MODE_STYLE.get(mode, dict(color="#222222", linestyle=":"))


def render_figures(reports, outdir) -> dict:
    """Render the three standard comparison figures as SVG files.

    Output is byte-deterministic for a given input: the SVG hash salt is
    pinned and no date metadata is embedded.
    """
    plt.rcParams["svg.hashsalt"] = "fleetgrid"
    meta = {"Date": None}
    out = {}

    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for rep in reports:
        series = _mean_lmp_by_step(rep)
        if series:
            ax.plot(list(series), list(series.values()), label=rep.mode,
                    **_style(rep.mode))
    ax.set_xlabel("step")
    ax.set_ylabel("mean price [$/MWh]")
    ax.set_title("electricity price by step")
    ax.legend()
    fig.tight_layout()
    path = f"{outdir}/prices.svg"
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    out["prices"] = path

    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    drew_exog = False
    for rep in reports:
        exog = _total_by_step(rep.exog_load)
        if exog and not drew_exog:
            # the exogenous world is seed-shared, one trace is enough
            ax.plot(list(exog), list(exog.values()), label="exogenous",
                    color="#222222", linestyle=":")
            drew_exog = True
        veh = _total_by_step(rep.vehicle_load)
        if veh:
            ax.plot(list(veh), list(veh.values()),
                    label=f"fleet ({rep.mode})", **_style(rep.mode))
    ax.set_xlabel("step")
    ax.set_ylabel("system load [MW]")
    ax.set_title("realized load by step")
    ax.legend()
    fig.tight_layout()
    path = f"{outdir}/loads.svg"
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    out["loads"] = path

    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for rep in reports:
        total = 0
        cum = []
        for n in rep.served_per_step:
            total += n
            cum.append(total)
        steps = range(1, len(cum) + 1)
        ax.plot(steps, cum, label=f"served ({rep.mode})", **_style(rep.mode))
        ax.plot(range(1, len(rep.outstanding_per_step) + 1),
                rep.outstanding_per_step, alpha=0.45, **_style(rep.mode))
    ax.set_xlabel("step")
    ax.set_ylabel("customers")
    ax.set_title("service progress (faint: still waiting)")
    ax.legend()
    fig.tight_layout()
    path = f"{outdir}/service.svg"
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    out["service"] = path
    return out
