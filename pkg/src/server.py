"""
MCP Server exposing finished segmentation studies: evaluation, cohort assessment, checkpoints
"""
import asyncio
import json
import logging
import sys
from typing import Sequence

from mcp.server import NotificationOptions, Server
from mcp.server.models import InitializationOptions
from mcp.types import EmbeddedResource, ImageContent, TextContent, Tool

from study_manager import StudyManager

logger = logging.getLogger(__name__)

# Global study manager - relative paths in tool arguments resolve against its base directory
study_manager: StudyManager = None


def init_study_manager(base_dir: str = None):
    """Initialize the study manager with a base directory"""
    global study_manager
    study_manager = StudyManager(base_dir)


# Create server instance
server = Server("hdan-study")


@server.list_tools()
async def handle_list_tools() -> list[Tool]:
    """List available tools"""
    return [
        Tool(
            name="evaluate_segmentations",
            description="Dice and modified Hausdorff distance per subject and tissue class, with per-class means",
            inputSchema={
                "type": "object",
                "properties": {
                    "pred_dir": {"type": "string", "description": "Directory of <subject>_pred label volumes"},
                    "truth_dir": {"type": "string", "description": "Directory of <subject>_label label volumes"},
                    "report_path": {"type": "string", "description": "Optional CSV report to write"}
                },
                "required": ["pred_dir", "truth_dir"]
            }
        ),
        Tool(
            name="assess_cohort",
            description="Tissue volumes and preterm vs term comparison (Welch t-test) from a cohort manifest",
            inputSchema={
                "type": "object",
                "properties": {
                    "manifest": {"type": "string", "description": "CSV with subject_id, group, path columns"},
                    "pred_dir": {"type": "string", "description": "Directory relative manifest paths resolve against"},
                    "include_std": {"type": "boolean", "description": "Render mean ± SD cells", "default": False}
                },
                "required": ["manifest"]
            }
        ),
        Tool(
            name="summarize_segmentation",
            description="WM, GM, CSF and brain volumes (mm3) and WM ratio of one label volume",
            inputSchema={
                "type": "object",
                "properties": {
                    "path": {"type": "string", "description": "Label volume file"}
                },
                "required": ["path"]
            }
        ),
        Tool(
            name="describe_checkpoint",
            description="Epoch, creation time, network and training configuration and loss history of a checkpoint",
            inputSchema={
                "type": "object",
                "properties": {
                    "path": {"type": "string", "description": "Checkpoint file written by training"}
                },
                "required": ["path"]
            }
        ),
        Tool(
            name="generate_phantoms",
            description="Write synthetic T1/T2/label phantoms with tunable WM-GM contrast plus a manifest",
            inputSchema={
                "type": "object",
                "properties": {
                    "out_dir": {"type": "string", "description": "Output directory"},
                    "count": {"type": "integer", "description": "Number of phantoms", "default": 1},
                    "size": {"type": "integer", "description": "Edge length in voxels", "default": 64},
                    "delta": {"type": "number", "description": "WM-GM contrast", "default": 0.1},
                    "sigma": {"type": "number", "description": "Noise standard deviation", "default": 0.05},
                    "seed": {"type": "integer", "description": "Seed of the first phantom", "default": 0}
                },
                "required": ["out_dir"]
            }
        ),
    ]


def _text(result) -> list[TextContent]:
    return [TextContent(type="text", text=json.dumps(result, indent=2, ensure_ascii=False))]


@server.call_tool()
async def handle_call_tool(name: str, arguments: dict | None) -> Sequence[TextContent | ImageContent | EmbeddedResource]:
    """Handle tool calls"""

    if study_manager is None:
        return [TextContent(type="text", text="Error: Study manager not initialized")]

    if arguments is None:
        arguments = {}

    try:
        if name == "evaluate_segmentations":
            result = study_manager.evaluate_segmentations(
                arguments["pred_dir"],
                arguments["truth_dir"],
                report_path=arguments.get("report_path")
            )
            return _text(result)

        elif name == "assess_cohort":
            result = study_manager.assess_cohort(
                arguments["manifest"],
                pred_dir=arguments.get("pred_dir"),
                include_std=arguments.get("include_std", False)
            )
            return _text(result)

        elif name == "summarize_segmentation":
            return _text(study_manager.summarize_segmentation(arguments["path"]))

        elif name == "describe_checkpoint":
            return _text(study_manager.describe_checkpoint(arguments["path"]))

        elif name == "generate_phantoms":
            result = study_manager.generate_phantoms(
                arguments["out_dir"],
                count=arguments.get("count", 1),
                size=arguments.get("size", 64),
                delta=arguments.get("delta", 0.1),
                sigma=arguments.get("sigma", 0.05),
                seed=arguments.get("seed", 0)
            )
            return _text(result)
        else:
            return [TextContent(type="text", text=f"Error: Unknown tool '{name}'")]

    except Exception as e:
        logger.warning("Tool %s failed: %s", name, e)
        return [TextContent(type="text", text=f"Error executing {name}: {str(e)}")]


async def main():
    """Main entry point"""
    # stdout carries the protocol stream
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    init_study_manager(sys.argv[1] if len(sys.argv) > 1 else None)

    from mcp.server.stdio import stdio_server

    async with stdio_server() as (read_stream, write_stream):
        await server.run(
            read_stream,
            write_stream,
            InitializationOptions(
                server_name="hdan-study",
                server_version="0.1.0",
                capabilities=server.get_capabilities(
                    notification_options=NotificationOptions(),
                    experimental_capabilities={},
                ),
            ),
        )


def run():
    asyncio.run(main())


if __name__ == "__main__":
    run()
