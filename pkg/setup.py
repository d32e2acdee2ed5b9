"""Build hook for the optional compiled kernels.

The package works without them: ``bcde._kernels`` falls back to numpy when
``_ckernels`` cannot be imported.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "bcde._kernels._ckernels",
                ["src/bcde/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
