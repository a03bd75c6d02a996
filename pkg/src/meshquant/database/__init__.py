from .models import (
    init, shutdown, connect,
    SweepPoint, PENDING, RUNNING, DONE, FAILED,
    register_point, mark_running, record_result, record_failure, list_points,
)
