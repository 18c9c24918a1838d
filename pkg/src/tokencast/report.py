"""Forecast verification reports and figures.

``evaluate_ensemble`` scores an ensemble nowcast against observations per
lead time (CRPS, rank histogram + KL, ensemble-mean continuous and
categorical scores, SAL, spectra) and returns a JSON-serializable report;
the plotting helpers draw the standard figures (CRPS vs lead time, rank
histograms, spectra, SAL scatter) from such a report.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from tokencast.grid import RadarSequence, ReflectivityField, dbz_to_rainrate
from tokencast.sal import sal
from tokencast.verification import (
    VerificationError,
    categorical_scores,
    continuous_scores,
    crps,
    rank_histogram,
    rapsd,
)


def _to_rain(frames: np.ndarray) -> np.ndarray:
    return dbz_to_rainrate(ReflectivityField(frames.reshape(-1, frames.shape[-1]))).values.reshape(frames.shape)


def evaluate_ensemble(
    obs: RadarSequence,
    members: list[RadarSequence],
    crps_units: str = "dbz",
    thresholds: tuple = (1.0, 10.0, 50.0),
    rank_seed: int = 0,
    wet_only: bool = False,
) -> dict:
    """Score an ensemble against observations, per lead time.

    ``obs`` holds the m verification frames aligned with each member's m
    lead steps. CRPS and rank histograms are computed over all pixels (or
    wet pixels only, obs rain > 0.1 mm/h, when ``wet_only``); continuous
    scores use the ensemble mean in dBZ; categorical scores and SAL use
    rain rates in mm/h.
    """
    if crps_units not in ("dbz", "mmh"):
        raise VerificationError("crps_units must be 'dbz' or 'mmh'")
    if not members:
        raise VerificationError("no ensemble members")
    stack = np.stack([m.values for m in members])  # (n, m, H, W)
    if stack.shape[1:] != obs.values.shape:
        raise VerificationError(f"members {stack.shape} do not match obs {obs.values.shape}")
    n, m = stack.shape[0], stack.shape[1]

    obs_rain_all = _to_rain(obs.values)
    per_lead = []
    spec_obs = []
    spec_ens = []
    for t in range(m):
        obs_t = obs.values[t]
        ens_t = stack[:, t]
        obs_rain = obs_rain_all[t]
        if crps_units == "mmh":
            crps_val = crps(_to_rain(ens_t), obs_rain)
            rank_members = _to_rain(ens_t).reshape(n, -1)
            rank_obs = obs_rain.reshape(-1)
        else:
            crps_val = crps(ens_t, obs_t)
            rank_members = ens_t.reshape(n, -1)
            rank_obs = obs_t.reshape(-1)
        wet_mask = (obs_rain.reshape(-1) > 0.1) if wet_only else None
        rh = rank_histogram(rank_members, rank_obs, seed=rank_seed + t, wet_mask=wet_mask)

        ens_mean = ens_t.mean(axis=0)
        cont = continuous_scores(obs_t, ens_mean)
        cat = categorical_scores(obs_rain, _to_rain(ens_mean[None])[0], thresholds)
        sal_score = sal(obs_rain, _to_rain(ens_mean[None])[0])

        spec_o = rapsd(ReflectivityField(obs_t, obs.resolution_km))
        spec_m = [rapsd(ReflectivityField(ens_t[i], obs.resolution_km)) for i in range(n)]
        spec_obs.append(spec_o.power)
        spec_ens.append(np.mean([s.power for s in spec_m], axis=0))

        per_lead.append(
            {
                "lead_minutes": (t + 1) * obs.timestep_minutes,
                "crps": crps_val,
                "rank_counts": rh.counts.tolist(),
                "rank_kl": rh.kl_from_uniform,
                "rank_samples": rh.n_samples,
                "ens_mean": cont,
                "categorical": {
                    str(thr): {"csi": v["csi"], "bias": v["bias"], "no_events": v["no_events"]}
                    for thr, v in cat.items()
                },
                "sal": {
                    "structure": sal_score.structure,
                    "amplitude": sal_score.amplitude,
                    "location": sal_score.location,
                },
            }
        )

    wavelength = rapsd(ReflectivityField(obs.values[0], obs.resolution_km)).wavelength_km
    with np.errstate(divide="ignore"):
        report = {
            "n_members": n,
            "n_leads": m,
            "crps_units": crps_units,
            "wet_only": wet_only,
            "timestep_minutes": obs.timestep_minutes,
            "per_lead": per_lead,
            "spectrum": {
                "wavelength_km": wavelength.tolist(),
                "obs_power_db": (10 * np.log10(np.mean(spec_obs, axis=0))).tolist(),
                "ens_power_db": (10 * np.log10(np.mean(spec_ens, axis=0))).tolist(),
            },
        }
    return report


def save_report(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def format_report(report: dict) -> str:
    """Human-readable per-lead summary table."""
    lines = [
        f"ensemble verification: {report['n_members']} members, "
        f"{report['n_leads']} lead steps, CRPS units {report['crps_units']}",
        f"{'lead[min]':>9} {'CRPS':>8} {'rankKL':>8} {'MAE':>8} {'SSIM':>6}  CSI/BIAS@thresholds",
    ]
    for rec in report["per_lead"]:
        cats = " ".join(
            f"{t}:{v['csi']:.2f}/{v['bias']:.2f}" if not v["no_events"] else f"{t}:n/a"
            for t, v in rec["categorical"].items()
        )
        lines.append(
            f"{rec['lead_minutes']:>9} {rec['crps']:>8.4f} {rec['rank_kl']:>8.4f} "
            f"{rec['ens_mean']['mae']:>8.4f} {rec['ens_mean']['ssim']:>6.3f}  {cats}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_crps(report: dict, path: str | Path) -> Path:
    plt = _pyplot()
    leads = [r["lead_minutes"] for r in report["per_lead"]]
    vals = [r["crps"] for r in report["per_lead"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(leads, vals, marker="o")
    ax.set_xlabel("lead time [min]")
    ax.set_ylabel(f"CRPS [{'mm/h' if report['crps_units'] == 'mmh' else 'dBZ'}]")
    ax.set_title("CRPS vs lead time (lower is better)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_rank_histograms(report: dict, path: str | Path) -> Path:
    plt = _pyplot()
    recs = report["per_lead"]
    ncols = min(len(recs), 4)
    nrows = (len(recs) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows), squeeze=False)
    for i, rec in enumerate(recs):
        ax = axes[i // ncols][i % ncols]
        counts = np.asarray(rec["rank_counts"], dtype=float)
        freq = counts / max(counts.sum(), 1)
        ax.bar(np.arange(freq.size), freq, width=0.9)
        ax.axhline(1.0 / freq.size, color="gray", lw=1)
        ax.set_title(f"+{rec['lead_minutes']} min, KL={rec['rank_kl']:.3f}", fontsize=9)
        ax.set_xticks([])
    for j in range(len(recs), nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    fig.suptitle("rank histograms (gray line = uniform)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_spectra(report: dict, path: str | Path) -> Path:
    plt = _pyplot()
    spec = report["spectrum"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(spec["wavelength_km"], spec["obs_power_db"], label="observation")
    ax.plot(spec["wavelength_km"], spec["ens_power_db"], label="ensemble mean spectrum")
    ax.set_xscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("wavelength [km]")
    ax.set_ylabel("power [dB]")
    ax.set_title("radially averaged power spectral density")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sal_scatter(report: dict, path: str | Path) -> Path:
    plt = _pyplot()
    recs = [r for r in report["per_lead"] if not np.isnan(r["sal"]["structure"])]
    fig, ax = plt.subplots(figsize=(5, 5))
    if recs:
        s = [r["sal"]["structure"] for r in recs]
        a = [r["sal"]["amplitude"] for r in recs]
        l = [r["sal"]["location"] for r in recs]
        sc = ax.scatter(s, a, c=l, cmap="viridis", vmin=0, vmax=max(max(l), 0.2))
        fig.colorbar(sc, ax=ax, label="location")
    ax.axhline(0, color="gray", lw=1)
    ax.axvline(0, color="gray", lw=1)
    ax.set_xlim(-2, 2)
    ax.set_ylim(-2, 2)
    ax.set_xlabel("structure")
    ax.set_ylabel("amplitude")
    ax.set_title("SAL decomposition per lead time")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


ALL_PLOTS = {
    "crps": plot_crps,
    "rank_hist": plot_rank_histograms,
    "spectra": plot_spectra,
    "sal": plot_sal_scatter,
}


def write_plots(report: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [fn(report, out_dir / f"{name}.png") for name, fn in ALL_PLOTS.items()]
