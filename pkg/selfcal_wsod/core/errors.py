"""
SELFCAL-WSOD Error Hierarchy
Every module raises its own subclass so the CLI can map failures to exit codes.

Exit codes:
  0  success
  1  runtime failure (training diverged, unwritable output, plugin crash...)
  2  configuration / validation error (bad preset override, malformed manifest...)
"""


class WsodError(Exception):
    exit_code = 1

    def __init__(self, message: str, code: str = "WSOD_ERROR"):
        self.message = message
        self.code = code
        super().__init__(self.message)


class ConfigError(WsodError):
    exit_code = 2

    def __init__(self, message: str, code: str = "CONFIG_ERROR"):
        super().__init__(message, code)


class DatasetError(WsodError):
    exit_code = 2

    def __init__(self, message: str, code: str = "DATASET_ERROR"):
        super().__init__(message, code)


class CamError(WsodError):
    def __init__(self, message: str, code: str = "CAM_ERROR"):
        super().__init__(message, code)


class RefinementError(WsodError):
    def __init__(self, message: str, code: str = "REFINEMENT_ERROR"):
        super().__init__(message, code)


class SaliencyNetError(WsodError):
    def __init__(self, message: str, code: str = "SALIENCY_NET_ERROR"):
        super().__init__(message, code)


class CalibrationError(WsodError):
    def __init__(self, message: str, code: str = "CALIBRATION_ERROR"):
        super().__init__(message, code)


class MetricsError(WsodError):
    def __init__(self, message: str, code: str = "METRICS_ERROR"):
        super().__init__(message, code)


class CheckpointError(WsodError):
    def __init__(self, message: str, code: str = "CHECKPOINT_ERROR"):
        super().__init__(message, code)


class LockError(WsodError):
    def __init__(self, message: str, code: str = "LOCKED"):
        super().__init__(message, code)


class ReportError(WsodError):
    def __init__(self, message: str, code: str = "REPORT_ERROR"):
        super().__init__(message, code)
