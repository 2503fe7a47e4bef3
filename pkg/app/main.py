from contextlib import asynccontextmanager

from fastapi import FastAPI, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.middleware.gzip import GZipMiddleware
from fastapi.responses import JSONResponse
from slowapi import _rate_limit_exceeded_handler
from slowapi.errors import RateLimitExceeded

from app.config import settings
from app.core.exceptions import NcjtError
from app.dependencies.limiter import limiter
from app.middleware import RequestLoggingMiddleware
from app.routes import api_router
from app.schemas.experiment import ALGORITHMS
from app.logging_config import logger  # Import logger

# Initialize Sentry if DSN is provided
if settings.SENTRY_DSN:
    import sentry_sdk
    from sentry_sdk.integrations.fastapi import FastApiIntegration

    sentry_sdk.init(
        dsn=settings.SENTRY_DSN,
        environment=settings.ENVIRONMENT,
        integrations=[FastApiIntegration(transaction_style="url")],
        traces_sample_rate=1.0,
    )

# Solver spans go to the collector when tracing is on
if settings.ENABLE_OPENTELEMETRY:
    from opentelemetry import trace
    from opentelemetry.sdk.trace import TracerProvider
    from opentelemetry.sdk.trace.export import BatchSpanProcessor
    from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter

    tracer_provider = TracerProvider()
    tracer_provider.add_span_processor(
        BatchSpanProcessor(OTLPSpanExporter(endpoint=settings.OTEL_EXPORTER_OTLP_ENDPOINT))
    )
    trace.set_tracer_provider(tracer_provider)


@asynccontextmanager
async def lifespan(application: FastAPI):
    logger.info(
        f"Serving {', '.join(ALGORITHMS)} with conic tol {settings.CONIC_TOL:g}, "
        f"feasibility tol {settings.FEAS_TOL:g}, {settings.RATE_LIMIT_PER_MINUTE} solves/minute per client"
    )
    yield
    logger.info("Solver API stopped")


async def ncjt_error_handler(request: Request, exc: NcjtError) -> JSONResponse:
    """Domain errors raised outside a route's own handling map to 400."""
    logger.warning(f"Rejected {request.url.path}: {str(exc)}")
    return JSONResponse(status_code=status.HTTP_400_BAD_REQUEST, content={"detail": str(exc)})


def create_application() -> FastAPI:
    """
    Build the solver API: scenario, solver and experiment routers under
    ``API_V1_STR`` with CORS, compression, request logging and a per-client
    rate limit on the solver endpoints.
    """
    application = FastAPI(
        title=settings.PROJECT_NAME,
        version=settings.VERSION,
        docs_url=f"{settings.API_V1_STR}/docs",
        redoc_url=f"{settings.API_V1_STR}/redoc",
        openapi_url=f"{settings.API_V1_STR}/openapi.json",
        lifespan=lifespan,
    )

    application.add_middleware(
        CORSMiddleware,
        allow_origins=settings.BACKEND_CORS_ORIGINS,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    # Scenario and solution documents are large JSON bodies
    application.add_middleware(GZipMiddleware, minimum_size=1000)
    application.add_middleware(RequestLoggingMiddleware)

    application.state.limiter = limiter
    application.add_exception_handler(RateLimitExceeded, _rate_limit_exceeded_handler)
    application.add_exception_handler(NcjtError, ncjt_error_handler)

    application.include_router(api_router, prefix=settings.API_V1_STR)
    return application


app = create_application()


@app.get("/health")
async def health_check():
    """Liveness plus the solvers this build serves."""
    logger.debug("Health check requested")
    return {
        "status": "healthy",
        "version": settings.VERSION,
        "environment": settings.ENVIRONMENT,
        "solvers": list(ALGORITHMS),
    }
