"""Model-free training of phase patterns against a black-box optical bench,
plus the simulated bench itself and a model-based twin to calibrate against.
"""

from .blackbox import (EnvDescriptor, LocalInstrument, RemoteInstrument,
                       connect_instrument, serve_sim)
from .errors import ConfigError, FormatError, InstrumentError, ProtocolError
from .optics import (AberrationSpec, BenchConfig, ComplexField, DetectorLayout,
                     DiffuserSpec, IntensityImage, NoiseModel, PhaseMap,
                     default_detector_layout, detector_energies, make_diffuser,
                     propagate, quantize_phase, run_bench, run_bench_batch,
                     wrap_phase, zernike_phase)
from .policy import (GaussianPolicy, entropy, kl, load_policy, log_prob,
                     make_policy, sample, save_policy)
from .rl import (InsilicoResult, Rollout, TrainerConfig, TrainingHistory,
                 insilico_gradient, normalize_advantages, pg_loss, ppo_loss,
                 train_insilico, train_pg, train_ppo)
from .tasks import (AberrationTask, ClassifyTask, DigitSet, FocusTask,
                    HologramTask, encode_digit, load_bundled_digits,
                    make_target, psnr)

__version__ = "0.1.0"
