#!/usr/bin/env python3
# -*- coding: utf-8 -*-
#
# medvqa documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir. All configuration values have a default; only the ones
# differing from it are set here.

import datetime
import os
import sys

import sphinx_rtd_theme

sys.path.insert(0, os.path.abspath('../'))
sys.path.insert(0, os.path.abspath('../../'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',

    # we need to import our custom_skip extension here otherwise napoleon
    # binds to the event instead:
    'sphinxext.custom_skip',

    'sphinx.ext.intersphinx',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',
    'sphinx.ext.autosummary',
]

templates_path = ['../templates']

source_suffix = ['.rst', '.md']

master_doc = 'index'

# General information about the project.
project = 'medvqa'
year = datetime.datetime.now().year
copyright = ' %d, the medvqa authors' % year
author = 'the medvqa authors'

version = '0.1'
release = '0.1.0'

exclude_patterns = ['_build']

pygments_style = 'sphinx'

# torch, timm and transformers are heavy; autodoc imports the modules with
# these mocked so the documentation builds without them.
autodoc_mock_imports = ['torch', 'torchvision', 'timm', 'transformers', 'tqdm']

# -- Options for HTML output ----------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]
html_title = 'medvqa v%s' % release
html_show_sourcelink = False
htmlhelp_basename = 'medvqadoc'

# -- Options for other output ---------------------------------------------

latex_documents = [
    (master_doc, 'medvqa.tex', 'medvqa Documentation', author, 'manual'),
]

man_pages = [
    (master_doc, 'medvqa', 'medvqa Documentation', [author], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'torch': ('https://pytorch.org/docs/stable', None),
}

autodoc_member_order = 'bysource'
autosummary_generate = True
autoclass_content = "both"
napoleon_google_docstring = True
