from models.grid import Coord, FeatureGrid, IndexGrid, MemoryStats
from models.hierarchy import AttributeSet, VoxelHierarchy
from models.latent import DecodeOutput, LatentGrid, LatentSample
from models.mesh import TriMesh
from models.params import ModelParams, ParamTensor
from models.schedule import NoiseSchedule
