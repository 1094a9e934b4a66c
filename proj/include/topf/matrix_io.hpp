#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <string>

namespace topf {

// Plain text matrix exchange format: a "rows cols" header line followed by
// one whitespace-separated row per line, row-major, full double precision.
void write_matrix(std::ostream& os, const Eigen::MatrixXd& m);
void write_matrix_file(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(std::istream& is);

}  // namespace topf
