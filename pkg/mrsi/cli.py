#!/usr/bin/env python3
"""
mrsi - command-line pipeline
Simulate an accelerated circle-trajectory MRSI acquisition, reconstruct it with
TGV-ER and with the joint-space network, then score and report both.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from mrsi.errors import MrsiError
from mrsi.pipeline.stages import STAGES, StageContext, StepTimer
from mrsi.settings import TOY_CONFIG, load_config, load_settings
from mrsi.utils.tracing import init_tracer

log = logging.getLogger("mrsi.cli")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class MrsiCLI:
    """Argument parsing and dispatch for the pipeline commands."""

    def __init__(self):
        self.parser = argparse.ArgumentParser(
            prog="mrsi",
            description="Desk-scale MRSI reconstruction pipeline",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Run every stage on the bundled toy config
  mrsi pipeline --out out

  # Stage by stage
  mrsi gen-traj --config exp.json --out out
  mrsi simulate --config exp.json --out out
  mrsi recon-tgv --config exp.json --out out --threads 4

Environment:
  MRSI_LOG       error | info | debug (default info)
  MRSI_THREADS   worker threads when --threads is not given
            """,
        )
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument("--config", default=str(TOY_CONFIG), help="Experiment config JSON (default: toy config)")
        common.add_argument("--seed", type=int, help="Override the config seed")
        common.add_argument("--threads", type=int, help="Worker threads; 1 gives bitwise reproducible output")
        common.add_argument("--out", help="Output directory (default: config output_dir)")

        subparsers = self.parser.add_subparsers(dest="command", help="Pipeline stages")
        for name, help_text in (
            ("gen-traj", "Generate the circle trajectory and undersampling patterns"),
            ("simulate", "Simulate water and metabolite acquisitions of the phantom"),
            ("preprocess", "Estimate coil maps, B0 and lipid mask; remove residual water"),
            ("recon-tgv", "Low-rank TGV reconstruction and iNUFT baseline per AF"),
            ("train", "Train the joint-space network on water data"),
            ("recon-net", "Network reconstruction per AF"),
            ("metrics", "Score every reconstruction against truth"),
            ("report", "Render slices, summary tables and the output manifest"),
            ("pipeline", "Run all stages in order"),
        ):
            subparsers.add_parser(name, help=help_text, parents=[common])

    def run(self, args: Optional[Sequence[str]] = None) -> int:
        """Run the CLI with provided arguments."""
        args = self.parser.parse_args(args)

        if not args.command:
            self.parser.print_help()
            return 1

        try:
            settings = load_settings(threads=args.threads)
            self._setup_logging(settings.log_level)
            init_tracer(settings.otlp_endpoint)
            cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.out})
            out = Path(cfg.output_dir)
            commands = list(STAGES) if args.command == "pipeline" else [args.command]
            for command in commands:
                self._run_stage(command, cfg, settings, out)
            return 0
        except MrsiError as e:
            print(f"error: {e}", file=sys.stderr)
            return e.exit_code

    def _run_stage(self, command, cfg, settings, out: Path) -> None:
        timer = StepTimer(command, out)
        ctx = StageContext(cfg, settings, out, timer)
        log.info("%s: start (out=%s, seed=%d, threads=%d)", command, out, cfg.seed, settings.threads)
        try:
            STAGES[command](ctx)
        finally:
            timer.write()
        log.info("%s: done in %.3f s", command, sum(dt for _, dt in timer.rows))

    @staticmethod
    def _setup_logging(level: str) -> None:
        logging.basicConfig(
            level=LOG_LEVELS[level],
            stream=sys.stderr,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            force=True,
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for CLI."""
    cli = MrsiCLI()
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
