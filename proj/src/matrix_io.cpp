#include "topf/matrix_io.hpp"

#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "topf/case_model.hpp"

namespace topf {

void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  os << m.rows() << ' ' << m.cols() << '\n';
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << m(i, j);
    }
    os << '\n';
  }
}

void write_matrix_file(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream os(path);
  if (!os) throw parse_error("cannot open for writing: " + path);
  write_matrix(os, m);
}

Eigen::MatrixXd read_matrix(std::istream& is) {
  Eigen::Index rows = 0, cols = 0;
  if (!(is >> rows >> cols) || rows < 0 || cols < 0)
    throw parse_error("matrix header must be 'rows cols'");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      if (!(is >> m(i, j)))
        throw parse_error("matrix body ended early");
  return m;
}

}  // namespace topf
