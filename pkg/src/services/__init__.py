"""MCP services for the affect pipeline"""
