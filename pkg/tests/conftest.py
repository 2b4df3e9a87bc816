import pytest

from sessionrec import kernels


def _available_backends():
    names = ["python"]
    try:
        kernels.get_backend("compiled")
        names.append("compiled")
    except ImportError:
        pass
    return names


@pytest.fixture(params=_available_backends())
def backend(request):
    """Kernel backend name; tests using this run once per available backend."""
    return request.param


@pytest.fixture(params=_available_backends())
def kern(request):
    """Kernel module for the parametrized backend."""
    return kernels.get_backend(request.param)
