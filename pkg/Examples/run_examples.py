'''
Runs every example script inside a unittest.TestCase, so `pytest Examples/run_examples.py`
checks that the examples still work with the current toolbox
'''
import importlib.util
import os
import sys
import unittest
from time import time

import matplotlib

matplotlib.use('Agg')

examples_dir = os.path.dirname(os.path.realpath(__file__))

all_scripts = [
    'example_01',
    'example_02',
    'example_03',
    'example_04',
]


def execute_script(fscript):
    # the examples resolve their inputs and outputs from their own directory
    fullpath = os.path.join(examples_dir, fscript + '.py')
    print('\nNOW RUNNING:', fscript)
    cwd = os.getcwd()
    os.chdir(examples_dir)
    try:
        spec = importlib.util.spec_from_file_location(fscript, fullpath)
        mod = importlib.util.module_from_spec(spec)
        s = time()
        spec.loader.exec_module(mod)
        print('{:.2f} seconds to run'.format(time() - s))
    finally:
        os.chdir(cwd)


def run_all_scripts(folder_string, scripts=all_scripts):
    for k in [m for m in scripts if folder_string in m]:
        try:
            execute_script(k)
        except Exception:
            print('Failed to run,', k)
            raise


class TestExamples(unittest.TestCase):

    def test_example_01(self):
        run_all_scripts('example_01')

    def test_example_02(self):
        run_all_scripts('example_02')

    def test_example_03(self):
        run_all_scripts('example_03')

    def test_example_04(self):
        run_all_scripts('example_04')


def suite():
    suite = unittest.TestSuite()
    suite.addTest(unittest.defaultTestLoader.loadTestsFromTestCase(TestExamples))
    return suite


if __name__ == '__main__':
    result = unittest.TextTestRunner().run(suite())
    sys.exit(not result.wasSuccessful())
