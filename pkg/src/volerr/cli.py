"""Command-line front end: simulate, decompose, identify, report, sync-check.

Exit codes are a stable contract: 0 success, 1 data or validation error,
2 configuration error (bad flags, unreadable or inconsistent config and
manifest files).  All console output is deterministic for fixed inputs;
progress lines are prefixed with the session id they belong to.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .decomposition import (
    DecomposeConfig,
    ReferenceArtifacts,
    StageError,
    decompose_files,
    read_decomposition,
    write_decomposition,
)
from .kinematics import (
    LINK_ERROR_NAMES,
    MachineGeometry,
    RankDeficiencyError,
    link_errors_to_dict,
)
from .metrics import (
    CONTRIBUTION_ORDER,
    build_campaign_report,
    write_campaign_report,
)
from .presets import demo_campaign_config
from .signal_io import (
    SensorCalibration,
    SignalLoadError,
    estimate_delay,
    load_signals,
)
from .virtual_machine import CampaignConfig, run_campaign

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2

_LINK_UNITS = {name: ("um" if name == "y_C" else "urad")
               for name in LINK_ERROR_NAMES}


class CliError(Exception):
    """Carries the exit code alongside the message."""

    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


def _load_json(path: Path, what: str) -> dict:
    """Read a JSON file, turning parse problems into config errors with
    the offending line and column."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc}", EXIT_CONFIG)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(
            f"{what} {path} is not valid JSON: {exc.msg} "
            f"(line {exc.lineno}, column {exc.colno})", EXIT_CONFIG)


def _load_campaign_config(path: Path) -> CampaignConfig:
    raw = _load_json(path, "config")
    try:
        return CampaignConfig.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"config {path}: {exc}", EXIT_CONFIG)


class Manifest:
    """Resolved campaign manifest: session directories plus shared files."""

    def __init__(self, path: Path):
        self.path = Path(path)
        raw = _load_json(self.path, "manifest")
        root = self.path.parent
        try:
            self.sessions = [
                {"id": s["id"], "feed_mm_min": float(s["feed_mm_min"]),
                 "dir": root / s["dir"], "ok": bool(s.get("ok", True))}
                for s in raw["sessions"]]
            self.reference_id = raw.get("reference")
            self.geometry_path = root / raw["geometry"]
            self.calibration_path = root / raw["calibration"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"manifest {self.path}: missing or bad field "
                           f"({exc})", EXIT_CONFIG)
        ids = [s["id"] for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise CliError(f"manifest {self.path}: duplicate session ids",
                           EXIT_CONFIG)
        if self.reference_id is not None and self.reference_id not in ids:
            raise CliError(
                f"manifest {self.path}: reference {self.reference_id!r} "
                f"is not one of the sessions", EXIT_CONFIG)

    def usable_sessions(self) -> list:
        return [s for s in self.sessions if s["ok"]]

    def reference(self) -> dict:
        if self.reference_id is None:
            raise CliError(f"manifest {self.path}: no reference session",
                           EXIT_CONFIG)
        return next(s for s in self.sessions if s["id"] == self.reference_id)

    def geometry(self) -> MachineGeometry:
        try:
            return MachineGeometry.load(self.geometry_path)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"geometry {self.geometry_path}: {exc}",
                           EXIT_CONFIG)

    def calibration(self) -> SensorCalibration:
        if not self.calibration_path.exists():
            return SensorCalibration.identity()
        try:
            return SensorCalibration.load(self.calibration_path)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"calibration {self.calibration_path}: {exc}",
                           EXIT_CONFIG)


def _decompose_config(args) -> DecomposeConfig:
    cfg = DecomposeConfig()
    if getattr(args, "degree", None) is not None:
        if args.degree < 1:
            raise CliError("--degree must be at least 1", EXIT_CONFIG)
        cfg = replace(cfg, degree=args.degree)
    if getattr(args, "delay_window_ms", None) is not None:
        if args.delay_window_ms <= 0:
            raise CliError("--delay-window-ms must be positive", EXIT_CONFIG)
        cfg = replace(cfg, delay_window_s=args.delay_window_ms * 1e-3)
    return cfg


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    if args.demo:
        config = demo_campaign_config()
    else:
        if args.config is None:
            raise CliError("simulate needs --config PATH or --demo",
                           EXIT_CONFIG)
        config = _load_campaign_config(Path(args.config))
    if args.seed is not None:
        config = replace(config, seed=args.seed)

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    config.save(out_root / "campaign_config.json")
    records = run_campaign(config, out_root, jobs=args.jobs)

    failed = 0
    for rec in records:
        if rec.ok:
            print(f"{rec.session_id}: ok  F={rec.feed_mm_min:g} mm/min")
        else:
            failed += 1
            print(f"{rec.session_id}: FAILED  {rec.error}")
    print(f"wrote {len(records) - failed}/{len(records)} sessions "
          f"to {out_root}")
    return EXIT_DATA if failed else EXIT_OK


# --------------------------------------------------------------- decompose

def _decompose_one(session: dict, out_dir: Path, geom: MachineGeometry,
                   cal: SensorCalibration,
                   reference: ReferenceArtifacts | None,
                   cfg: DecomposeConfig):
    decomp = decompose_files(session["dir"], geom, cal=cal,
                             reference=reference, config=cfg,
                             feed_mm_min=session["feed_mm_min"])
    write_decomposition(decomp, out_dir)
    return decomp


def _decompose_worker(payload):
    """Process-pool job: decompose one non-reference session from disk."""
    session_dir, out_dir, feed, geom_path, cal_path, ref_path, cfg_kw = payload
    geom = MachineGeometry.load(geom_path)
    cal = (SensorCalibration.load(cal_path) if Path(cal_path).exists()
           else SensorCalibration.identity())
    reference = ReferenceArtifacts.load(ref_path)
    decomp = decompose_files(session_dir, geom, cal=cal, reference=reference,
                             config=DecomposeConfig(**cfg_kw),
                             feed_mm_min=feed)
    write_decomposition(decomp, out_dir)
    return decomp.delay_s, decomp.sensor_delay_s


def cmd_decompose(args) -> int:
    manifest = Manifest(Path(args.manifest))
    geom = manifest.geometry()
    cal = manifest.calibration()
    cfg = _decompose_config(args)
    sessions = manifest.usable_sessions()
    if not sessions:
        raise CliError(f"manifest {manifest.path}: no usable sessions")
    ref = manifest.reference()
    out_root = Path(args.out) if args.out else manifest.path.parent / "decomposed"
    out_root.mkdir(parents=True, exist_ok=True)

    # the reference session runs first: every other session reuses its
    # identified link errors and fitted motion model
    try:
        ref_decomp = _decompose_one(ref, out_root / ref["id"], geom, cal,
                                    None, cfg)
    except (StageError, SignalLoadError, RankDeficiencyError, ValueError) as exc:
        print(f"{ref['id']}: FAILED  {exc}", file=sys.stderr)
        return EXIT_DATA
    artifacts_path = out_root / "reference_artifacts.json"
    ref_decomp.artifacts.save(artifacts_path)
    print(f"{ref['id']}: reference  delay={ref_decomp.delay_s * 1e3:.2f} ms  "
          f"sensor_delay={ref_decomp.sensor_delay_s * 1e3:.2f} ms")

    rest = [s for s in sessions if s["id"] != ref["id"]]
    failed = 0
    if args.jobs > 1 and len(rest) > 1:
        from concurrent.futures import ProcessPoolExecutor
        cfg_kw = {"degree": cfg.degree, "delay_window_s": cfg.delay_window_s}
        payloads = [(str(s["dir"]), str(out_root / s["id"]), s["feed_mm_min"],
                     str(manifest.geometry_path),
                     str(manifest.calibration_path), str(artifacts_path),
                     cfg_kw) for s in rest]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {pool.submit(_decompose_worker, p): s
                       for p, s in zip(payloads, rest)}
            results = {}
            for fut, s in futures.items():
                try:
                    results[s["id"]] = fut.result()
                except Exception as exc:
                    results[s["id"]] = exc
        for s in rest:  # report in manifest order, not completion order
            res = results[s["id"]]
            if isinstance(res, Exception):
                failed += 1
                print(f"{s['id']}: FAILED  {res}", file=sys.stderr)
            else:
                print(f"{s['id']}: ok  delay={res[0] * 1e3:.2f} ms  "
                      f"sensor_delay={res[1] * 1e3:.2f} ms")
    else:
        for s in rest:
            try:
                d = _decompose_one(s, out_root / s["id"], geom, cal,
                                   ref_decomp.artifacts, cfg)
                print(f"{s['id']}: ok  delay={d.delay_s * 1e3:.2f} ms  "
                      f"sensor_delay={d.sensor_delay_s * 1e3:.2f} ms")
            except (StageError, SignalLoadError, ValueError) as exc:
                failed += 1
                print(f"{s['id']}: FAILED  {exc}", file=sys.stderr)
    print(f"decomposed {len(sessions) - failed}/{len(sessions)} sessions "
          f"to {out_root}")
    return EXIT_DATA if failed else EXIT_OK


# ---------------------------------------------------------------- identify

def cmd_identify(args) -> int:
    manifest = Manifest(Path(args.manifest))
    geom = manifest.geometry()
    cal = manifest.calibration()
    cfg = _decompose_config(args)
    ref = manifest.reference()
    try:
        decomp = decompose_files(ref["dir"], geom, cal=cal, reference=None,
                                 config=cfg, feed_mm_min=ref["feed_mm_min"])
    except (StageError, SignalLoadError, RankDeficiencyError, ValueError) as exc:
        print(f"{ref['id']}: {exc}", file=sys.stderr)
        return EXIT_DATA

    ident = decomp.artifacts.identification
    dq_named = decomp.artifacts.to_dict()["link_errors"]
    stderr_named = link_errors_to_dict(ident.stderr)

    print(f"link errors identified on {ref['id']} "
          f"(F={ref['feed_mm_min']:g} mm/min, n={decomp.n} samples)")
    print(f"{'parameter':<12}{'value':>14}{'std error':>14}  unit")
    rows = {}
    for name in LINK_ERROR_NAMES:
        unit = _LINK_UNITS[name]
        key = f"{name}_{unit}"
        print(f"{name:<12}{dq_named[key]:>14.4f}{stderr_named[key]:>14.4f}"
              f"  {unit}")
        rows[name] = {"value": dq_named[key], "stderr": stderr_named[key],
                      "unit": unit}
    print(f"condition number: {ident.condition:.6g}")

    if args.out:
        payload = {
            "session": ref["id"],
            "feed_mm_min": ref["feed_mm_min"],
            "parameters": rows,
            "condition": ident.condition,
            "singular_values": ident.singular_values.tolist(),
        }
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(payload, indent=2) + "\n")
        print(f"wrote {out_path}")
    return EXIT_OK


# ------------------------------------------------------------------ report

def cmd_report(args) -> int:
    art_root = Path(args.artifacts)
    if not art_root.is_dir():
        raise CliError(f"artifact directory {art_root} does not exist")
    session_dirs = sorted(p.parent for p in art_root.glob("*/summary.json"))
    if not session_dirs:
        raise CliError(f"no decomposition artifacts under {art_root}")

    decomps = []
    for sdir in session_dirs:
        try:
            decomps.append(read_decomposition(sdir))
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"artifact {sdir}: {exc}")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = build_campaign_report(decomps)
    for w in caught:
        print(f"warning: {w.message}")

    out_dir = Path(args.out) if args.out else art_root
    write_campaign_report(report, out_dir)

    width = max(len(k) for k in CONTRIBUTION_ORDER) + 2
    header = f"{'F_mm_min':>9}" + "".join(
        f"{k:>{width}}" for k in CONTRIBUTION_ORDER)
    print("mean share of the total error norm (%)")
    print(header)
    for sess in report["sessions"]:
        row = f"{sess['feed_mm_min']:>9g}"
        for k in CONTRIBUTION_ORDER:
            row += f"{sess['shares_percent'][k]:>{width}.1f}"
        print(row)
    fits = report["dynamic_rms_power_law"]
    if fits:
        print("dynamic rms power law per direction:")
        for d, fit in fits.items():
            print(f"  {d}: kappa={fit['kappa']:.6g} um, N={fit['exponent']:.4f},"
                  f" R2={fit['r2']:.4f}")
    print(f"wrote report.json, rms_vs_feed.csv, rms_vs_feed.svg to {out_dir}")
    return EXIT_OK


# -------------------------------------------------------------- sync-check

def cmd_sync_check(args) -> int:
    manifest = Manifest(Path(args.manifest))
    window_s = (args.delay_window_ms * 1e-3
                if args.delay_window_ms is not None else 0.05)
    failed = 0
    for s in manifest.usable_sessions():
        try:
            ctrl = load_signals(Path(s["dir"]) / "controller.csv", "joint")
            enc = load_signals(Path(s["dir"]) / "encoder.csv", "joint")
            d = estimate_delay(ctrl, enc, search_window_s=window_s)
            print(f"{s['id']}: encoder lags controller by {d * 1e3:.3f} ms")
        except (SignalLoadError, ValueError) as exc:
            failed += 1
            print(f"{s['id']}: FAILED  {exc}", file=sys.stderr)
    return EXIT_DATA if failed else EXIT_OK


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volerr",
        description="Volumetric error decomposition toolkit for five-axis "
                    "machine tools: synthetic campaigns, error separation, "
                    "link-error identification and reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate",
                       help="generate a synthetic measurement campaign")
    p.add_argument("--config", help="campaign config JSON")
    p.add_argument("--demo", action="store_true",
                   help="use the built-in six-feed demo campaign")
    p.add_argument("--out", default="campaign",
                   help="output directory (default: campaign)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel sessions (default 1)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decompose",
                       help="decompose every session of a campaign")
    p.add_argument("manifest", help="path to manifest.json")
    p.add_argument("--out", default=None,
                   help="artifact directory (default: <campaign>/decomposed)")
    p.add_argument("--degree", type=int, default=None,
                   help="motion polynomial degree (default 20)")
    p.add_argument("--delay-window-ms", type=float, default=None,
                   help="delay search half-window in ms (default 50)")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel sessions after the reference (default 1)")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("identify",
                       help="identify link errors on the reference session")
    p.add_argument("manifest", help="path to manifest.json")
    p.add_argument("--out", default=None, help="write the table as JSON here")
    p.add_argument("--degree", type=int, default=None)
    p.add_argument("--delay-window-ms", type=float, default=None)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("report",
                       help="aggregate decomposition artifacts into tables "
                            "and plots")
    p.add_argument("artifacts", help="directory holding per-session artifacts")
    p.add_argument("--out", default=None,
                   help="report directory (default: the artifact directory)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sync-check",
                       help="estimate the controller/encoder recording delay "
                            "per session")
    p.add_argument("manifest", help="path to manifest.json")
    p.add_argument("--delay-window-ms", type=float, default=None)
    p.set_defaults(func=cmd_sync_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SignalLoadError, StageError, RankDeficiencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
