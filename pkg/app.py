import os
import logging
import dotenv
dotenv.load_dotenv()

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
from typing import List, Optional, Dict, Any

# Import lab modules
from occupation_lab import __version__
from occupation_lab.errors import LabError
from occupation_lab.excursions import build_scaffold
from occupation_lab.functionals import closed_form_theta, estimate_theta, get_functional
from occupation_lab.lattice import parse_site_set, sites_to_strings
from occupation_lab.potential import equilibrium_measure, green_function, hit_probabilities
from occupation_lab.rng import RngStream
from occupation_lab.settings import configure_logging, environment_status
from occupation_lab.variational import ThetaModel, solve_constrained

# Configure logging
configure_logging()
logger = logging.getLogger("occupation-lab-api")

# Create FastAPI app
app = FastAPI(
    title="Occupation Lab API",
    description="Green function, capacity, theta and variational solves for occupation-time experiments",
    version=__version__
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Largest replica count served synchronously
MAX_HTTP_REPLICAS = 50_000

# ---- Error handling middleware ----
@app.middleware("http")
async def log_and_handle_exceptions(request: Request, call_next):
    try:
        response = await call_next(request)
        return response
    except Exception as e:
        logger.error(f"Unhandled exception: {str(e)}", exc_info=True)
        return JSONResponse(
            status_code=500,
            content={"detail": f"Internal server error: {str(e)}"}
        )

# ---- Health Check & Environment Info ----
@app.get("/")
async def root():
    """Health check endpoint that also returns environment info"""
    return {
        "status": "online",
        "app": "Occupation Lab API",
        "version": __version__,
        "environment": environment_status()
    }

# ---- Green Function Endpoint ----
class GreenRequest(BaseModel):
    x: List[int]
    y: List[int]
    accuracy: float = Field(1e-4, gt=0)

class GreenResponse(BaseModel):
    value: float
    accuracy: float

@app.post("/green", response_model=GreenResponse)
async def green_endpoint(req: GreenRequest):
    """Green function g(x, y) of the simple random walk"""
    try:
        logger.info(f"Green request: x={req.x}, y={req.y}")
        value = green_function(req.x, req.y, req.accuracy)
        return GreenResponse(value=value, accuracy=req.accuracy)
    except LabError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Green error: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Green function error: {str(e)}")

# ---- Capacity Endpoint ----
class CapacityRequest(BaseModel):
    sites: str = Field(..., description='"B(0,4)" or "{0,e1}"')
    d: int = 3
    accuracy: float = Field(1e-4, gt=0)

class CapacityResponse(BaseModel):
    capacity: float
    error_bound: float
    truncation_radius: int
    equilibrium_measure: Dict[str, float]

@app.post("/capacity", response_model=CapacityResponse)
async def capacity_endpoint(req: CapacityRequest):
    """Capacity and equilibrium measure of a finite set"""
    try:
        logger.info(f"Capacity request: {req.sites}")
        K = parse_site_set(req.sites, req.d)
        eq = equilibrium_measure(K, req.accuracy)
        keep = eq.mass > 0
        measure = dict(zip(sites_to_strings(eq.sites[keep]), (float(m) for m in eq.mass[keep])))
        return CapacityResponse(capacity=eq.capacity, error_bound=eq.error_bound,
                                truncation_radius=eq.truncation_radius, equilibrium_measure=measure)
    except LabError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Capacity error: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Capacity error: {str(e)}")

# ---- Hitting Probability Endpoint ----
class HitRequest(BaseModel):
    points: List[List[int]]
    sites: str
    d: int = 3
    accuracy: float = Field(1e-4, gt=0)

@app.post("/hit-probability")
async def hit_probability_endpoint(req: HitRequest):
    """P_x[H_A < infinity] by the last-exit decomposition"""
    try:
        logger.info(f"Hit probability request: {len(req.points)} points, set {req.sites}")
        A = parse_site_set(req.sites, req.d)
        values = hit_probabilities(req.points, A, req.accuracy)
        return {"probabilities": [float(v) for v in values]}
    except LabError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Hit probability error: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Hit probability error: {str(e)}")

# ---- Theta Endpoint ----
class ThetaRequest(BaseModel):
    functional: str = "F2"
    levels: List[float]
    replicas: int = Field(0, ge=0, le=MAX_HTTP_REPLICAS, description="0 = closed form only")
    seed: int = 0
    d: int = 3

class ThetaResponse(BaseModel):
    functional: str
    levels: List[float]
    closed_form: Optional[List[float]] = None
    estimates: Optional[List[float]] = None
    half_widths: Optional[List[float]] = None

@app.post("/theta", response_model=ThetaResponse)
async def theta_endpoint(req: ThetaRequest):
    """theta(u) in closed form where it exists, estimated when replicas > 0"""
    try:
        logger.info(f"Theta request: {req.functional} at {len(req.levels)} levels, {req.replicas} replicas")
        F = get_functional(req.functional, req.d)
        exact = closed_form_theta(F, req.levels)
        response = ThetaResponse(functional=F.name, levels=req.levels,
                                 closed_form=[float(v) for v in exact] if exact is not None else None)
        if req.replicas >= 2:
            estimate = estimate_theta(F, req.levels, req.replicas, RngStream(req.seed, 0, "http-theta"), workers=1)
            response.levels = [float(u) for u in estimate.levels]
            response.estimates = [float(v) for v in estimate.estimates]
            response.half_widths = [float(v) for v in estimate.half_widths]
            if exact is not None:
                response.closed_form = [float(v) for v in closed_form_theta(F, estimate.levels)]
        elif exact is None:
            raise HTTPException(status_code=400, detail=f"{F.name} has no closed form; ask for replicas >= 2")
        return response
    except HTTPException:
        raise
    except (LabError, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Theta error: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Theta error: {str(e)}")

# ---- Scaffold Validation Endpoint ----
class ScaffoldRequest(BaseModel):
    x0: List[int]
    N: int = Field(..., ge=2)
    delta_tilde: float = Field(..., gt=0)
    exponents: Optional[List[float]] = None
    radii: Optional[List[int]] = None

@app.post("/scaffold/validate")
async def scaffold_endpoint(req: ScaffoldRequest):
    """Check the nested-box constraints of a mesoscopic scaffold"""
    try:
        logger.info(f"Scaffold request: N={req.N}, exponents={req.exponents}, radii={req.radii}")
        scaffold = build_scaffold(req.x0, req.N, req.delta_tilde, exponents=req.exponents, radii=req.radii)
        return {"valid": True, "scaffold": scaffold.as_dict()}
    except LabError as e:
        return {"valid": False, "reason": str(e)}
    except Exception as e:
        logger.error(f"Scaffold error: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Scaffold error: {str(e)}")

# ---- Variational Solve Endpoint ----
class SolveRequest(BaseModel):
    theta: str = Field("F2", description="F1 (linear) or F2 (closed form)")
    nu: float = Field(..., gt=0)
    shape: str = "ball"
    r_D: float = Field(1.0, gt=0)
    r: float = Field(4.0, gt=0)
    h: float = Field(0.5, gt=0)

@app.post("/solve")
async def solve_endpoint(req: SolveRequest):
    """Constrained Dirichlet-energy minimisation at one level"""
    try:
        logger.info(f"Solve request: theta={req.theta}, nu={req.nu}, D={req.shape}({req.r_D}), r={req.r}, h={req.h}")
        if req.theta == "F1":
            theta = ThetaModel.linear()
        elif req.theta == "F2":
            theta = ThetaModel.closed_form_f2()
        else:
            raise HTTPException(status_code=400, detail=f"Unsupported theta model: {req.theta}")
        solution = solve_constrained(theta, req.nu, req.shape, req.r_D, req.r, req.h)
        return {"summary": solution.summary()}
    except HTTPException:
        raise
    except LabError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Solve error: {str(e)}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"Solve error: {str(e)}")

# Server startup for local development
if __name__ == "__main__":
    import uvicorn
    port = int(os.environ.get("PORT", 8000))
    uvicorn.run("app:app", host="0.0.0.0", port=port, reload=True)
