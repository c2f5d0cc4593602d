"""Pipeline MCP tools using the subprocess-based run manager"""

import asyncio
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from fastmcp import FastMCP
from pydantic import Field

from ..affect.annotations import EXPRESSION_NAMES, ValenceArousal
from ..affect.errors import AffectError
from ..affect.labelfusion import histogram_from_summary, soft_expression
from ..affect.metrics import au_criterion, expression_criterion, overall_score, va_score
from ..affect.pipeline import STAGES
from ..config import PathsConfig, PipelineConfig, ServerConfig
from ..utils.common import parse_bool_param, parse_float_param, parse_int_param
from ..utils.run_manager import RunManager
from ..utils.storage import read_json

logger = logging.getLogger(__name__)


def _truncate(text: str, limit: int = 100) -> str:
    return text[:limit] + "..." if len(text) > limit else text


def register_tools(mcp: FastMCP, config: ServerConfig):
    """Register pipeline run, scoring and soft-label tools"""

    run_manager = RunManager(state_dir=str(Path(config.config_dir) / "run_states"))

    @mcp.tool
    async def affect_start_run(
        config_path: Annotated[
            Optional[str],
            Field(default=None, description="JSON pipeline configuration file"),
        ] = None,
        corpus_dir: Annotated[
            Optional[str],
            Field(
                default=None,
                description="Corpus root with annotations/, landmarks/, frames/ and audio/ (overrides configured paths)",
            ),
        ] = None,
        output_dir: Annotated[
            Optional[str],
            Field(default=None, description="Directory receiving all artifacts"),
        ] = None,
        seed: Annotated[
            Optional[Union[int, str]],
            Field(default=None, description="Seed for every random draw of the run"),
        ] = None,
        pseudo: Annotated[
            Optional[Literal["none", "valence", "va", "va+ex"]],
            Field(default=None, description="Pseudo label policy"),
        ] = None,
        filter: Annotated[
            Optional[Union[bool, str]],
            Field(default=None, description="Exclude contradictory annotations"),
        ] = None,
        stages: Annotated[
            Optional[List[Literal["labels", "audio", "align", "clips", "forward", "eval"]]],
            Field(default=None, description="Subset of stages to run (default: all, in pipeline order)"),
        ] = None,
    ) -> Dict[str, Any]:
        """
        Start the affect pipeline in a background process.

        The configuration is validated before anything is launched. Use
        affect_check_run with the returned session_id to monitor progress.
        """
        try:
            overrides: Dict[str, Any] = {
                "seed": parse_int_param(seed),
                "pseudo": pseudo,
                "filter": parse_bool_param(filter),
                "paths": {},
            }
            if corpus_dir:
                overrides["paths"].update(PathsConfig.corpus_layout(corpus_dir))
            if output_dir:
                overrides["paths"]["output"] = output_dir

            try:
                pipeline_config = PipelineConfig.load(config_path, overrides)
            except AffectError as e:
                return {"error": f"Invalid configuration: {e}", "success": False}

            result = await asyncio.to_thread(
                run_manager.start_run,
                pipeline_config.model_dump(mode="json", by_alias=True),
                list(stages) if stages else None,
            )
            if result.get("status") == "failed":
                return {"error": result["error"], "session_id": result["session_id"], "success": False}

            return {
                "session_id": result["session_id"],
                "status": result["status"],
                "pid": result["pid"],
                "message": f"Pipeline run started. Use affect_check_run with session_id '{result['session_id']}' to monitor progress.",
                "output": pipeline_config.paths.output,
                "stages": list(stages) if stages else list(STAGES),
            }

        except Exception as e:
            return {"error": f"Failed to start pipeline run: {str(e)}", "success": False}

    @mcp.tool
    async def affect_check_run(
        session_id: Annotated[str, Field(description="Session ID returned from affect_start_run")],
    ) -> Dict[str, Any]:
        """Check the status of a background pipeline run."""
        try:
            result = await asyncio.to_thread(run_manager.get_status, session_id)
            if result.get("error") == "Run session not found":
                return {
                    "error": f"Session {session_id} not found",
                    "hint": "Use affect_list_runs to see known sessions",
                }
            return result
        except Exception as e:
            return {"error": f"Failed to check run status: {str(e)}"}

    @mcp.tool
    async def affect_list_runs(
        active_only: Annotated[
            Union[bool, str],
            Field(default=False, description="Only show active (running) runs"),
        ] = False,
    ) -> Dict[str, Any]:
        """List all pipeline run sessions, newest first."""
        try:
            active_only = parse_bool_param(active_only, default=False)
            result = await asyncio.to_thread(run_manager.list_runs, active_only=active_only)

            runs = []
            for run in result:
                info = {
                    "session_id": run["session_id"],
                    "status": run["status"],
                    "progress": run.get("progress", ""),
                    "stage": run.get("stage"),
                    "output": run.get("output"),
                    "started_at": run["started_at"],
                    "pid": run.get("pid"),
                }
                if run["status"] == "completed" and run.get("report"):
                    info["digest"] = run["report"].get("digest")
                if run.get("error"):
                    info["error"] = _truncate(run["error"])
                runs.append(info)

            return {"runs": runs, "total": len(runs), "active_only": active_only}

        except Exception as e:
            return {"error": f"Failed to list runs: {str(e)}"}

    @mcp.tool
    async def affect_cancel_run(
        session_id: Annotated[str, Field(description="Session ID of the run to cancel")],
    ) -> Dict[str, Any]:
        """Cancel a running pipeline (SIGTERM, then SIGKILL after 5 seconds)."""
        try:
            return await asyncio.to_thread(run_manager.cancel_run, session_id)
        except Exception as e:
            return {"error": f"Failed to cancel run: {str(e)}", "success": False}

    @mcp.tool
    async def affect_cleanup_runs(
        older_than_days: Annotated[
            Union[int, str],
            Field(default=7, description="Delete sessions older than this many days (minimum 1)"),
        ] = 7,
        finished_only: Annotated[
            Union[bool, str],
            Field(default=True, description="Only cleanup completed/failed/cancelled sessions"),
        ] = True,
    ) -> Dict[str, Any]:
        """
        Clean up old run sessions.

        Removes state, configuration and log files. Run outputs are left in place.
        """
        try:
            older_than_days = max(parse_int_param(older_than_days, default=7), 1)
            finished_only = parse_bool_param(finished_only, default=True)
            cleaned = await asyncio.to_thread(run_manager.cleanup_runs, older_than_days, finished_only)
            return {
                "success": True,
                "cleaned_sessions": cleaned,
                "message": f"Cleaned up {cleaned} old sessions",
            }
        except Exception as e:
            return {"error": f"Failed to cleanup sessions: {str(e)}", "success": False}

    @mcp.tool
    async def affect_score(
        ccc_valence: Annotated[Union[float, str], Field(description="CCC of valence")],
        ccc_arousal: Annotated[Union[float, str], Field(description="CCC of arousal")],
        ex_macro_f1: Annotated[Union[float, str], Field(description="Macro F1 over the 7 expressions")],
        ex_accuracy: Annotated[Union[float, str], Field(description="Expression accuracy")],
        au_avg_f1: Annotated[Union[float, str], Field(description="Mean F1 over action units")],
        au_accuracy: Annotated[Union[float, str], Field(description="Total action unit accuracy")],
    ) -> Dict[str, Any]:
        """
        Combine challenge metrics into the three task scores and the overall score.

        EX = 0.67 * F1 + 0.33 * accuracy, AU = 0.5 * F1 + 0.5 * accuracy,
        VA = mean CCC, overall = unweighted mean of the three.
        """
        values = {
            "ccc_valence": parse_float_param(ccc_valence),
            "ccc_arousal": parse_float_param(ccc_arousal),
            "ex_macro_f1": parse_float_param(ex_macro_f1),
            "ex_accuracy": parse_float_param(ex_accuracy),
            "au_avg_f1": parse_float_param(au_avg_f1),
            "au_accuracy": parse_float_param(au_accuracy),
        }
        missing = sorted(name for name, value in values.items() if value is None)
        if missing:
            return {"error": f"Not a number: {', '.join(missing)}", "success": False}

        va = va_score(values["ccc_valence"], values["ccc_arousal"])
        ex = expression_criterion(values["ex_macro_f1"], values["ex_accuracy"])
        au = au_criterion(values["au_avg_f1"], values["au_accuracy"])
        return {
            "success": True,
            "va_score": va,
            "ex_score": ex,
            "au_score": au,
            "overall": overall_score(va, ex, au),
        }

    @mcp.tool
    async def affect_soft_expression(
        histogram_json: Annotated[
            str,
            Field(description="Histogram summary written by the labels stage (labels/histograms.json)"),
        ],
        valence: Annotated[Union[float, str], Field(description="Valence in [-1, 1]")],
        arousal: Annotated[Union[float, str], Field(description="Arousal in [-1, 1]")],
    ) -> Dict[str, Any]:
        """
        Soft expression distribution at a VA point.

        Each expression's probability is its count in the histogram bin containing
        (valence, arousal), normalized over all expressions in that bin.
        """
        v, a = parse_float_param(valence), parse_float_param(arousal)
        if v is None or a is None:
            return {"error": "valence and arousal must be numbers", "success": False}
        va = ValenceArousal(v, a)
        if not va.is_valid():
            return {"error": "valence and arousal must lie in [-1, 1]", "success": False}

        try:
            hist = await asyncio.to_thread(lambda: histogram_from_summary(read_json(histogram_json)))
        except (OSError, ValueError, KeyError) as e:
            return {"error": f"Cannot read histogram summary {histogram_json}: {e}", "success": False}

        try:
            soft = soft_expression(hist, va)
        except AffectError as e:
            return {"error": str(e), "success": False}
        return {
            "success": True,
            "valence": v,
            "arousal": a,
            "probabilities": dict(zip(EXPRESSION_NAMES, soft.probs)),
        }
