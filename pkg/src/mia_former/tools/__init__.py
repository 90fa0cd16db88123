"""MCP tools for MIA-Former analysis."""
