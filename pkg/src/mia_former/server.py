"""FastMCP server for MIA-Former analysis.

This module initializes the FastMCP server and registers the FLOPs and
policy-trace analysis tools.
"""

from fastmcp import FastMCP

mcp = FastMCP("MIA-Former Analysis")


def main() -> None:
    """Entry point for running the MCP server."""
    # Tools register themselves via @mcp.tool() when imported
    from mia_former.tools import analysis  # noqa: F401, PLC0415

    mcp.run()


if __name__ == "__main__":
    main()
