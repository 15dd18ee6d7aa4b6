from .matchers import ExternalMatcher, Matcher, MatcherError, ToyMatcher, toy_matcher
from .metrics import (DetCurve, OperatingPoint, apcer_bpcer, bpcer_at_apcer, confidence_half_width,
                      det_curve, mmpmr, threshold_at_far)
from .quality import QualityEntry, QualityReport, morph_quality, ms_ssim, psnr, ssim
from .vulnerability import (MorphRecord, VulnerabilityReport, evaluate_vulnerability, impostor_scores,
                            read_detector_scores, read_scores_csv, write_det_csv, write_scores_csv)
