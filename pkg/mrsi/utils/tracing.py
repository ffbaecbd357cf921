from contextlib import contextmanager
from time import perf_counter
from typing import Optional

from opentelemetry import trace
from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor

_tracer_initialized = False


def init_tracer(endpoint: Optional[str] = None, service_name: str = "mrsi"):
    """Install a tracer provider; spans are exported only when an OTLP endpoint is given."""
    global _tracer_initialized
    if _tracer_initialized:
        return
    provider = TracerProvider(resource=Resource.create({"service.name": service_name}))
    if endpoint:
        provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint)))
    trace.set_tracer_provider(provider)
    _tracer_initialized = True


@contextmanager
def start_span(name: str):
    tracer = trace.get_tracer("mrsi.pipeline")
    with tracer.start_as_current_span(name) as span:
        t0 = perf_counter()
        try:
            yield span
        except Exception as e:
            span.record_exception(e)
            span.set_attribute("error", True)
            raise
        finally:
            span.set_attribute("duration_ms", (perf_counter() - t0) * 1000.0)


@contextmanager
def stage(name: str):
    with start_span(f"pipeline.stage.{name}") as span:
        yield span
