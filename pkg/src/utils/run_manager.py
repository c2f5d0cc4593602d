"""Run manager for background pipeline processes"""

import logging
import os
import signal
import subprocess
import sys
import threading
import time
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import psutil

from .storage import read_json, write_json

logger = logging.getLogger(__name__)

ACTIVE_STATUSES = ("starting", "running")
FINISHED_STATUSES = ("completed", "failed", "cancelled")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManager:
    """Starts pipeline runs in detached worker processes and tracks them through state files"""

    def __init__(self, state_dir: str):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        # guards read-modify-write of state files within this process
        self._lock = threading.RLock()

    def _get_state_file(self, session_id: str) -> Path:
        return self.state_dir / f"{session_id}.json"

    def _get_config_file(self, session_id: str) -> Path:
        return self.state_dir / "configs" / f"{session_id}.json"

    def _read_state(self, session_id: str) -> Optional[Dict[str, Any]]:
        state_file = self._get_state_file(session_id)
        if state_file.exists():
            try:
                return read_json(state_file)
            except (OSError, ValueError):
                return None
        return None

    def _write_state(self, session_id: str, state: Dict[str, Any]) -> None:
        write_json(self._get_state_file(session_id), state)

    def _is_process_running(self, pid: int) -> bool:
        """True while pid is alive and is one of our workers"""
        try:
            proc = psutil.Process(pid)
            if proc.status() == psutil.STATUS_ZOMBIE:
                logger.warning(f"Process {pid} is a zombie, attempting to reap")
                try:
                    os.waitpid(pid, os.WNOHANG)
                except (OSError, ChildProcessError):
                    pass
                return False
            return "run_worker" in " ".join(proc.cmdline())
        except psutil.NoSuchProcess:
            return False
        except psutil.Error as e:
            logger.debug(f"Error checking process {pid}: {e}")
            return True  # exists but cannot be inspected

    def _refresh(self, session_id: str, state: Dict[str, Any]) -> Dict[str, Any]:
        """Mark runs whose worker vanished as failed"""
        if state.get("pid") and state["status"] in ACTIVE_STATUSES:
            if not self._is_process_running(state["pid"]):

                def mark_failed(latest: Dict[str, Any]) -> None:
                    if latest["status"] in ACTIVE_STATUSES:
                        latest["status"] = "failed"
                        latest["error"] = latest.get("error") or "Run process terminated unexpectedly"

                return self._modify_state(session_id, mark_failed) or state
        return state

    def start_run(self, config: Dict[str, Any], stages: Optional[List[str]] = None) -> Dict[str, Any]:
        """Start a run of the given pipeline configuration (a PipelineConfig as a dict)"""
        session_id = f"run_{uuid.uuid4().hex[:8]}_{int(time.time())}"
        logger.info(f"Starting new run session: {session_id}")

        config_file = self._get_config_file(session_id)
        write_json(config_file, config)

        state = {
            "session_id": session_id,
            "status": "starting",
            "progress": "initializing subprocess",
            "stage": None,
            "stages": stages,
            "output": config.get("paths", {}).get("output"),
            "started_at": utc_now(),
            "updated_at": utc_now(),
            "pid": None,
            "error": None,
            "report": None,
        }
        self._write_state(session_id, state)

        cmd = [
            sys.executable,
            "-m",
            "src.utils.run_worker",
            "--session-id",
            session_id,
            "--state-dir",
            str(self.state_dir),
            "--config",
            str(config_file),
        ]
        if stages:
            cmd.extend(["--stages", ",".join(stages)])

        try:
            project_root = Path(__file__).parent.parent.parent
            log_dir = self.state_dir / "logs"
            log_dir.mkdir(exist_ok=True)
            with open(log_dir / f"{session_id}_stdout.log", "w") as stdout_log, open(
                log_dir / f"{session_id}_stderr.log", "w"
            ) as stderr_log:
                proc = subprocess.Popen(
                    cmd,
                    stdout=stdout_log,
                    stderr=stderr_log,
                    start_new_session=True,
                    cwd=str(project_root),
                    env=os.environ.copy(),
                )
        except OSError as e:
            logger.error(f"Failed to start run subprocess: {e}")
            state["status"] = "failed"
            state["error"] = str(e)
            self._write_state(session_id, state)
            return {"session_id": session_id, "status": "failed", "error": str(e)}

        def mark_launched(latest: Dict[str, Any]) -> None:
            # the worker may already have written progress
            latest["pid"] = proc.pid
            if latest["status"] == "starting":
                latest["status"] = "running"
                latest["progress"] = "subprocess started"

        self._modify_state(session_id, mark_launched)
        logger.info(f"Started subprocess with PID {proc.pid} for session {session_id}")
        return {
            "session_id": session_id,
            "status": "started",
            "pid": proc.pid,
            "message": "Pipeline run started in background",
        }

    def get_status(self, session_id: str) -> Dict[str, Any]:
        state = self._read_state(session_id)
        if not state:
            return {"error": "Run session not found", "session_id": session_id}
        return self._refresh(session_id, state)

    def list_runs(self, active_only: bool = False) -> List[Dict[str, Any]]:
        """All run sessions, newest first"""
        runs = []
        for state_file in self.state_dir.glob("run_*.json"):
            state = self._read_state(state_file.stem)
            if not state:
                continue
            state = self._refresh(state_file.stem, state)
            if not active_only or state["status"] in ACTIVE_STATUSES:
                runs.append(state)
        runs.sort(key=lambda x: x.get("started_at", ""), reverse=True)
        return runs

    def cancel_run(self, session_id: str) -> Dict[str, Any]:
        state = self._read_state(session_id)
        if not state:
            return {"error": "Run session not found", "session_id": session_id}

        if state["status"] not in ACTIVE_STATUSES:
            return {
                "error": f"Cannot cancel run in status: {state['status']}",
                "session_id": session_id,
                "status": state["status"],
            }

        pid = state.get("pid")
        if pid:
            try:
                os.kill(pid, signal.SIGTERM)
                logger.info(f"Sent SIGTERM to process {pid} for session {session_id}")
                for _ in range(50):
                    if not self._is_process_running(pid):
                        break
                    time.sleep(0.1)
                if self._is_process_running(pid):
                    os.kill(pid, signal.SIGKILL)
                    time.sleep(0.1)
                    logger.warning(f"Force killed process {pid} for session {session_id}")
                try:
                    os.waitpid(pid, os.WNOHANG)
                except (OSError, ChildProcessError):
                    pass
            except OSError:
                pass  # already gone

        self._update_session_state(session_id, {"status": "cancelled", "error": "Cancelled by user"})
        return {
            "session_id": session_id,
            "status": "cancelled",
            "message": "Run cancelled successfully",
        }

    def cleanup_runs(self, older_than_days: int = 7, finished_only: bool = True) -> int:
        """Remove state, config and log files of old sessions; returns the number removed"""
        cutoff = time.time() - older_than_days * 24 * 60 * 60
        cleaned = 0
        for run in self.list_runs():
            session_id = run["session_id"]
            try:
                if int(session_id.split("_")[-1]) > cutoff:
                    continue
            except (ValueError, IndexError):
                continue
            if finished_only and run["status"] not in FINISHED_STATUSES:
                continue
            state_file = self._get_state_file(session_id)
            if state_file.exists():
                state_file.unlink()
                cleaned += 1
            self._get_config_file(session_id).unlink(missing_ok=True)
            for log_file in (self.state_dir / "logs").glob(f"{session_id}_*.log"):
                log_file.unlink(missing_ok=True)
        return cleaned

    def _modify_state(self, session_id: str, change: Callable[[Dict[str, Any]], None]) -> Optional[Dict[str, Any]]:
        """Apply change to the current state on disk under the manager lock"""
        with self._lock:
            state = self._read_state(session_id)
            if not state:
                return None
            change(state)
            state["updated_at"] = utc_now()
            try:
                self._write_state(session_id, state)
            except OSError as e:
                logger.error(f"Failed to update session state: {e}")
            return state

    def _update_session_state(self, session_id: str, updates: Dict[str, Any]) -> None:
        """Update specific fields in session state"""
        self._modify_state(session_id, lambda state: state.update(updates))
