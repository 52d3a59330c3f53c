"""millforge: level-set topology optimization under CNC milling accessibility."""

from .errors import EmptyShapeError, FloatingStructureError, MillforgeError
from .grid import GridSpec
from .levelset import LevelSet, SurfaceSamples
from .heat import TemperatureField, grad_T, solve_heat
from .milling import (
    DirectionSet,
    FilterField,
    MillTestResult,
    ToolModel,
    filter_3axis,
    filter_5axis_heat_search,
    filter_5axis_hemisphere,
    filter_5axis_normal_search,
    hemisphere_directions,
    milling_test,
)
from .fem import (
    ElasticState,
    LoadCase,
    Material,
    PatchRegion,
    discretize,
    shape_gradient_compliance,
    solve,
)
from .optimizer import (
    AugLagState,
    MillingSpec,
    Problem,
    RunResult,
    apply_growth_gate,
    lagrangian_gradient,
    line_search,
    outer_update,
    relaxed_step,
    run,
    strict_step,
)
from .io import read_grid_file, read_stl, voxelize_stl, write_grid_file, write_surface_stl
from .problems import build_problem, bundled_problem_path, load_problem

__version__ = "0.1.0"
