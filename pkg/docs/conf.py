#
# SNOW toolbox documentation build configuration file.
#
# Builds the index and the autosummary API pages of docs/source from the docstrings
# of SNOW_toolbox, which is imported from the repository root.
#
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(os.path.dirname(__file__))))

from SNOW_toolbox import __version__  # noqa: E402

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.napoleon",
    "sphinx.ext.viewcode",
]

autosummary_generate = True
autodoc_member_order = "groupwise"
autodoc_default_options = {"members": True, "show-inheritance": True}

# docstrings use 'Parameters:' / 'Returns:' sections
napoleon_google_docstring = False
napoleon_numpy_docstring = True

source_suffix = ".rst"
master_doc = "index"
exclude_patterns = ["_build"]

project = "SNOW toolbox"
copyright = "2021, SNOW toolbox developers"
author = "SNOW toolbox developers"
release = __version__
version = ".".join(release.split(".")[:2])

pygments_style = "sphinx"

# -- Options for HTML output ----------------------------------------------

html_theme = "sphinx_rtd_theme"
htmlhelp_basename = "SNOWdoc"
