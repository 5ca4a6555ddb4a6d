import argparse
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd


def parse_args(argv: Optional[List[str]] = None):
    p = argparse.ArgumentParser(description="Summarize recent densratio run records.")
    p.add_argument("--metrics-dir", default="metrics", help="Directory containing run_*.json files")
    p.add_argument("--n", type=int, default=10, help="How many recent runs to summarize")
    return p.parse_args(argv)


def load_json(path: Path) -> Dict[str, Any]:
    with path.open("r", encoding="utf-8") as f:
        return json.load(f)


def summarize(metrics_dir: Path, n: int = 10) -> pd.DataFrame:
    """One row per run record, newest first."""
    files = sorted(metrics_dir.glob("run_*.json"), reverse=True)[:n]

    rows: List[Dict[str, Any]] = []
    for fp in files:
        d = load_json(fp)
        run = d.get("run", {})
        rows.append(
            {
                "file": fp.name,
                "timestamp": run.get("timestamp"),
                "command": run.get("command"),
                "exit_code": run.get("exit_code"),
                "seed": d.get("seeds", {}).get("seed"),
                "inputs": len(d.get("inputs", {})),
                "outputs": len(d.get("outputs", [])),
                "duration_s": run.get("duration_s"),
            }
        )
    return pd.DataFrame(rows)


def main(argv: Optional[List[str]] = None) -> None:
    args = parse_args(argv)
    metrics_dir = Path(args.metrics_dir)

    table = summarize(metrics_dir, args.n)
    if table.empty:
        print(f"No run_*.json files found in: {metrics_dir.resolve()}")
        return
    print(table.to_string(index=False))


if __name__ == "__main__":
    main()
