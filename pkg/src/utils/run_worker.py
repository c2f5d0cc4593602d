#!/usr/bin/env python3
"""Worker process executing one pipeline run in the background"""

import argparse
import logging
import signal
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.affect.errors import AffectError, ConfigError, StageError
from src.affect.pipeline import STAGES, report_digest, run_pipeline
from src.config import PipelineConfig
from src.utils.logging import setup_logging
from src.utils.run_manager import utc_now
from src.utils.storage import read_json, write_json

logger = logging.getLogger(__name__)


class RunWorker:
    """Runs the pipeline and mirrors its progress into the session state file"""

    def __init__(self, session_id: str, state_dir: str):
        self.session_id = session_id
        self.state_file = Path(state_dir) / f"{session_id}.json"

        signal.signal(signal.SIGTERM, self._signal_handler)
        signal.signal(signal.SIGINT, self._signal_handler)

    def _signal_handler(self, signum, frame):
        self._update_state({"status": "cancelled", "error": "Run interrupted"})
        sys.exit(0)

    def _read_state(self) -> Dict[str, Any]:
        try:
            return read_json(self.state_file)
        except (OSError, ValueError) as e:
            logger.error(f"Error reading state: {e}")
            return {}

    def _update_state(self, updates: Dict[str, Any]) -> None:
        state = self._read_state()
        state.update(updates)
        state["updated_at"] = utc_now()
        try:
            write_json(self.state_file, state)
        except OSError as e:
            logger.error(f"Error updating state: {e}")

    def _on_progress(self, stage: str, done: int, total: int) -> None:
        self._update_state({"status": "running", "stage": stage, "progress": f"{stage}: {done}/{total}"})

    def run(self, config_path: str, stages: Optional[List[str]] = None) -> int:
        self._update_state({"status": "running", "progress": "loading configuration", "error": None})
        try:
            config = PipelineConfig.load(config_path)
        except ConfigError as e:
            self._update_state({"status": "failed", "error": f"Invalid configuration: {e}"})
            return 2

        try:
            report = run_pipeline(config, progress_callback=self._on_progress, stages=stages or STAGES)
        except StageError as e:
            self._update_state({"status": "failed", "stage": e.stage, "error": str(e)})
            return 1
        except AffectError as e:
            self._update_state({"status": "failed", "error": f"{type(e).__name__}: {e}"})
            return 1

        self._update_state(
            {
                "status": "completed",
                "progress": "run completed",
                "report": {
                    "path": str(Path(config.paths.output) / "report.json"),
                    "digest": report_digest(report),
                    "stages": report["stages"],
                },
                "completed_at": utc_now(),
            }
        )
        logger.info("Pipeline run completed successfully")
        return 0


def main():
    parser = argparse.ArgumentParser(description="Affect pipeline run worker")
    parser.add_argument("--session-id", required=True, help="Run session ID")
    parser.add_argument("--state-dir", required=True, help="State directory path")
    parser.add_argument("--config", required=True, help="Pipeline configuration JSON")
    parser.add_argument("--stages", default=None, help="Comma-separated subset of stages")
    args = parser.parse_args()

    setup_logging()
    stages = [s for s in args.stages.split(",") if s] if args.stages else None
    worker = RunWorker(args.session_id, args.state_dir)
    try:
        code = worker.run(args.config, stages)
    except Exception as e:
        logger.error(f"Fatal error in worker main: {e}", exc_info=True)
        worker._update_state({"status": "failed", "error": f"Worker crashed: {e}"})
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
