from .quantize import add_parser as add_quantize_parser, cmd_quantize
from .report import add_parser as add_report_parser, cmd_report
from .simulate import add_parser as add_simulate_parser, cmd_simulate
from .verify import add_parser as add_verify_parser, cmd_verify

COMMAND_PARSERS = [add_simulate_parser, add_verify_parser, add_quantize_parser, add_report_parser]

__all__ = [
    "cmd_simulate", "cmd_verify", "cmd_quantize", "cmd_report",
    "COMMAND_PARSERS",
]
