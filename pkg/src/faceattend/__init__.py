"""Face detection, fisherface recognition and attendance logging."""
from .attendance import AttendanceLog, AttendanceRecord, export_csv, import_csv
from .boosting import Cascade, HaarCascadeClassifier, adaboost, classify_window, train_cascade
from .detector import DetectParams, Detection, detect, extract_chip, nms, scan
from .errors import FaceAttendError
from .haar import HaarFeature, enumerate_features, eval_feature
from .imagecore import GrayImage, IntegralImage, Rect, crop_resize, flatten, integral, load_gray, rect_sum, save_gray
from .recognizer import FisherfaceRecognizer, Gallery, MatchResult, Roster, build_gallery, recognize, train
from .subspace import SubspaceModel, covariance, fast_pca, lda_train, mean_face, oracle_eig, project, scatter_matrices

__version__ = "0.1.0"

__all__ = [
    "AttendanceLog", "AttendanceRecord", "export_csv", "import_csv",
    "Cascade", "HaarCascadeClassifier", "adaboost", "classify_window", "train_cascade",
    "DetectParams", "Detection", "detect", "extract_chip", "nms", "scan",
    "FaceAttendError",
    "HaarFeature", "enumerate_features", "eval_feature",
    "GrayImage", "IntegralImage", "Rect", "crop_resize", "flatten", "integral", "load_gray", "rect_sum", "save_gray",
    "FisherfaceRecognizer", "Gallery", "MatchResult", "Roster", "build_gallery", "recognize", "train",
    "SubspaceModel", "covariance", "fast_pca", "lda_train", "mean_face", "oracle_eig", "project",
    "scatter_matrices",
]
