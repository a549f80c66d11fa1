#pragma once

#include "dif/tensor.hpp"

#include <unsupported/Eigen/FFT>

#include <complex>

namespace dif {

// Row-column 2D DFT in double; sizes here are small (<= a few hundred) so no
// effort is spent on real-input shortcuts.
inline Eigen::MatrixXcd fft2(const Eigen::MatrixXd& in) {
  const int h = (int)in.rows(), w = (int)in.cols();
  Eigen::FFT<double> fft;
  Eigen::MatrixXcd tmp(h, w), out(h, w);
  Eigen::VectorXcd vin(w), vout(w);
  for (int i = 0; i < h; ++i) {
    vin = in.row(i).transpose().cast<std::complex<double>>();
    fft.fwd(vout, vin);
    tmp.row(i) = vout.transpose();
  }
  Eigen::VectorXcd cin(h), cout(h);
  for (int j = 0; j < w; ++j) {
    cin = tmp.col(j);
    fft.fwd(cout, cin);
    out.col(j) = cout;
  }
  return out;
}

// Move DC to the center bin (h/2, w/2).
template <class Mat>
Mat fftshift(const Mat& in) {
  const int h = (int)in.rows(), w = (int)in.cols();
  Mat out(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) out((i + h / 2) % h, (j + w / 2) % w) = in(i, j);
  return out;
}

template <class S>
Eigen::MatrixXd channel_to_matrix(const Tensor<S>& img, int c) {
  const int h = img.shape[1], w = img.shape[2];
  Eigen::MatrixXd out(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) out(i, j) = (double)img.at(c, i, j);
  return out;
}

}  // namespace dif
