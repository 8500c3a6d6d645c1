#!/usr/bin/env python3
"""
Desk-scale directional checks
Runs FairGRAPE against the baselines on the synthetic data and reports pass/fail
"""
import json
import sys
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fairgrape.benchmarks import CHECKS, DESK_SEEDS  # noqa: E402
from fairgrape.cli import setup_logging  # noqa: E402


@click.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/desk", show_default=True)
@click.option("--seeds", type=int, default=len(DESK_SEEDS), show_default=True, help="Paired seeds per method")
@click.option("--check", "checks", type=click.Choice(list(CHECKS)), multiple=True,
              help="Run only these checks (default: all)")
@click.option("--log-level", default="WARNING", show_default=True)
def main(out_dir, seeds, checks, log_level):
    setup_logging(log_level)
    failed = 0
    click.echo("🚀 FairGRAPE desk-scale checks")
    click.echo("=" * 60)
    for name in checks or CHECKS:
        result = CHECKS[name](out_dir, list(range(seeds)))
        mark = "✅" if result["success"] else "❌"
        click.echo(f"{mark} {name}: {result['message']}")
        for hint in result["hints"]:
            click.echo(f"   ⚠️  {hint}")
        details = result["data"] if result["success"] else result["data"]["error_details"]
        click.echo(json.dumps(details, indent=2))
        failed += not result["success"]
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
