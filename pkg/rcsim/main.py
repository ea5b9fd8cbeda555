from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from rcsim import __version__
from rcsim.config import configure_logging, get_settings
from rcsim.routes import simulation_router

configure_logging(get_settings().log_level)

# Create FastAPI app
app = FastAPI(
    title="RCanopus Simulator API",
    description="Deterministic simulation and invariant checking of hierarchical BFT consensus",
    version=__version__,
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(simulation_router)


@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": "RCanopus Simulator API",
        "version": __version__,
        "endpoints": {
            "simulation": "/simulation",
            "docs": "/docs",
        },
    }


@app.get("/health")
async def health():
    """Health check endpoint"""
    return {"status": "healthy"}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=9000)
