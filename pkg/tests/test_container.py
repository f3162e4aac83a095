import threading
import unittest

from container import Container


class TestParallelMap(unittest.TestCase):
    def setUp(self):
        self.container = Container()

    def tearDown(self):
        self.container.shutdown()

    def test_results_keep_input_order(self):
        # Arrange
        self.container.configure(threads=4)

        # Act
        result = self.container.parallel_map(lambda k: k * k, range(20))

        # Assert
        self.assertEqual(result, [k * k for k in range(20)])

    def test_single_thread_runs_inline(self):
        # Arrange
        self.container.configure(threads=1)
        caller = threading.current_thread().name

        # Act
        names = self.container.parallel_map(lambda _: threading.current_thread().name, range(3))

        # Assert
        self.assertEqual(names, [caller] * 3)

    def test_nested_calls_do_not_block(self):
        # Arrange
        self.container.configure(threads=2)

        def outer(k):
            return sum(self.container.parallel_map(lambda j: j + k, range(3)))

        # Act
        result = self.container.parallel_map(outer, range(4))

        # Assert
        self.assertEqual(result, [3 + 3 * k for k in range(4)])

    def test_invalid_thread_count(self):
        with self.assertRaises(ValueError):
            self.container.configure(threads=0)


if __name__ == "__main__":
    unittest.main()
