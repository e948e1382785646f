"""Masked two-party split finding."""

from vfboost.protocol.noise import (CategoricalMatrix, NoisedResponse,
                                    NoiseMatrix, SplittingVector,
                                    build_splitting_vector, candidate_scores,
                                    cyclic_differences, information_noising,
                                    node_matrix, noise_calibration,
                                    noise_covariance, pp_evaluate_splits)
from vfboost.protocol.parties import ActiveParty, PassiveParty, handle_table
from vfboost.protocol.training import (BudgetOdometer, ReplayReport,
                                       TrainResult, combine, ldp_sigma, replay,
                                       train_ldp_baseline, train_masked)
from vfboost.protocol.transcript import (Message, ProtocolTranscript,
                                         TranscriptRecord, decode_payload,
                                         encode_payload)
