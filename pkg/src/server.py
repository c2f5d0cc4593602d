"""Main MCP server implementation using FastMCP"""

import asyncio
import logging

from fastmcp import FastMCP

from .config import ServerConfig
from .services import pipeline_tools
from .utils.logging import setup_logging

logger = logging.getLogger(__name__)


def create_server() -> FastMCP:
    """Create and configure the MCP server"""
    logger.debug("Loading configuration from environment...")
    try:
        config = ServerConfig.from_env()
        logger.debug("Configuration loaded successfully")
    except Exception as e:
        logger.error(f"Failed to load configuration: {type(e).__name__}: {str(e)}")
        raise

    setup_logging(level=config.log_level, format="[%(levelname)s] %(message)s")

    mcp = FastMCP(
        name="Aural-Visual Affect MCP Server",
        instructions="""
This server runs the two-stream aural-visual affect pipeline through MCP tools.

Available tools:

Pipeline runs:
- affect_start_run: Validate a configuration and run the pipeline in the background
- affect_check_run: Check the status and current stage of a run
- affect_list_runs: List all runs
- affect_cancel_run: Cancel a running pipeline
- affect_cleanup_runs: Remove state files of old runs

Scoring and labels:
- affect_score: Combine CCC, F1 and accuracy values into the challenge scores
- affect_soft_expression: Look up the soft expression distribution at a valence/arousal point

Runs write every artifact under the configured output directory; report.json
summarizes a finished run and is byte-identical for identical inputs and seed.
""",
    )

    logger.debug("Registering MCP services...")
    pipeline_tools.register_tools(mcp, config)
    logger.debug("Pipeline tools registered")

    logger.info("MCP server initialized successfully")
    return mcp


def main():
    """Main entry point for the server"""
    mcp = create_server()
    logger.info("Starting affect MCP server...")
    asyncio.run(mcp.run_async())


if __name__ == "__main__":
    main()
