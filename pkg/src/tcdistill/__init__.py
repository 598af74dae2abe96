"""Key-frame selection and temporally consistent segmentation distillation."""

from .imagery import (ClassMask, ColorImage, GrayImage, SoftMask, SynthSpec,
                      VideoSequence, generate_synthetic, load_sequence,
                      save_sequence, to_gray)
from .keyframe import SelectionResult, select_keyframes, select_uniform
from .metrics import EvalReport, evaluate, miou, temporal_consistency
from .models import (StudentParams, TeacherConfig, TeacherMemory, build_memory,
                     extract_features, init_student, load_student,
                     mask_to_onehot, make_teacher_builder, propagate,
                     save_student, soft_to_hard, student_backward,
                     student_forward)
from .ssim import SsimParams, compute_ssim
from .training import (KeyFrameStore, TrainConfig, build_temporal_set, kf_loss,
                       run_training, tc_loss, total_loss, train_round,
                       train_supervised)

__version__ = "0.1.0"
