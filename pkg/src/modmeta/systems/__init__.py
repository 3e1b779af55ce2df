"""Ground-truth parametric systems, integration and task datasets."""
from .dataset import (DatasetSplit, TaskDataset, build_dataset, build_task, load_dataset, save_dataset,
                      split_counts)
from .dynamics import (energy, generic_energy, generic_entropy, hamiltonian, tgc_entropy_from_energy,
                       tgc_internal_energies, tgc_mask, true_field)
from .integrate import IntegrationError, Trajectory, finite_difference, rk4_integrate, rk4_states
from .sampling import kepler_f_min, sample_initial, sample_task, task_rng
from .spec import (DIMS, GENERIC_IDS, HAMILTONIAN_IDS, SYSTEM_IDS, DomainError, SystemSpec,
                   default_spec)
