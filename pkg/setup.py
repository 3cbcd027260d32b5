import numpy as np
from setuptools import setup, Extension
from Cython.Build import cythonize

ext_module = Extension(
    "kdlab.kernels._convc",
    ["src/kdlab/kernels/_convc.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize(ext_module, language_level=3))
