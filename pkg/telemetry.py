"""
Tracing and environment settings shared by the training pipeline.
"""

import logging
import os
from contextlib import nullcontext

from dotenv import find_dotenv, load_dotenv
from opentelemetry import trace

logger = logging.getLogger(__name__)

_TRUTHY = {"1", "true", "yes", "on"}
_configured = False


def env_flag(name: str, default: bool = False) -> bool:
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in _TRUTHY


def load_environment(path: str = None) -> None:
    """Load a .env file (searched from the working directory) without overriding exported variables."""
    load_dotenv(path or find_dotenv(usecwd=True), override=False)


def log_level() -> str:
    return os.environ.get("MPTHCL_LOG_LEVEL", "INFO").upper()


def default_output_dir() -> str:
    return os.environ.get("MPTHCL_OUTPUT_DIR", "runs")


def configure_tracing(console: bool = None) -> None:
    """
    Install an SDK tracer provider that prints spans to stderr.

    Without it the API's no-op tracer is used and spans cost nothing.
    """
    global _configured
    if console is None:
        console = env_flag("MPTHCL_TRACE_CONSOLE")
    if not console or _configured:
        return
    from opentelemetry.sdk.trace import TracerProvider
    from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor

    provider = TracerProvider()
    provider.add_span_processor(SimpleSpanProcessor(ConsoleSpanExporter()))
    trace.set_tracer_provider(provider)
    _configured = True
    logger.debug("Console span exporter installed")


def get_tracer(name: str):
    return trace.get_tracer(name)


def create_span(tracer, name: str):
    if not tracer:
        return nullcontext()
    try:
        return tracer.start_as_current_span(name)
    except Exception as e:
        logger.warning("Could not create span %s: %s", name, e)
        return nullcontext()


def set_attributes(span, **attributes) -> None:
    """Set span attributes, skipping spans that are absent or not recording."""
    if span is None or not hasattr(span, "is_recording") or not span.is_recording():
        return
    for key, value in attributes.items():
        span.set_attribute(key, value)
