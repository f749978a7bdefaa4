from physcapture.physics.contact import ContactPoint
from physcapture.physics.contact import detect_contacts
from physcapture.physics.dynamics import forward_dynamics
from physcapture.physics.dynamics import mass_matrix
from physcapture.physics.scene import analytic_sdf
from physcapture.physics.scene import SceneGeometry
from physcapture.physics.sdf import bake_sdf
from physcapture.physics.sdf import geman_mcclure
from physcapture.physics.sdf import sample_sdf
from physcapture.physics.sdf import SdfGrid
from physcapture.physics.world import pd_torques
from physcapture.physics.world import rollout_batch
from physcapture.physics.world import rollout_target
from physcapture.physics.world import SimConfig
from physcapture.physics.world import SimulationDivergedError
from physcapture.physics.world import SimWorld
from physcapture.physics.world import step
