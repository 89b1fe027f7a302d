#pragma once

#include <functional>
#include <string>

#include "cellsynth/common.hpp"

namespace cellsynth {

/// Cell Tracking Challenge SEG: mean over ground-truth instances of the IoU with the predicted
/// instance covering more than half of it (0 when none does).
double seg_score(const LabelMap& pred, const LabelMap& gt);

struct FeatureSet {
    int n = 0;
    int d = 0;
    /// Row-major n x d.
    std::vector<double> rows;
    std::vector<double> mean;
    /// Row-major d x d unbiased covariance.
    std::vector<double> covariance;
};

/// Requires n >= 2 equally long, finite rows.
FeatureSet make_feature_set(const std::vector<std::vector<double>>& rows);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).
double frechet_distance(const FeatureSet& a, const FeatureSet& b);

using FeatureExtractor = std::function<std::vector<double>(const GrayImage&)>;

FeatureSet extract_features(const std::vector<GrayImage>& images, const FeatureExtractor& extractor);

/// Area-averages an image down to side x side and flattens it.
FeatureExtractor downsample_extractor(int side = 8);

struct MetricRecord {
    std::string metric;
    std::string dataset;
    double value = 0.0;
};

/// One "metric<TAB>dataset<TAB>value" line per record.
std::string format_records(const std::vector<MetricRecord>& records);
/// Datasets as rows, metrics as columns.
std::string format_table(const std::vector<MetricRecord>& records);

}  // namespace cellsynth
