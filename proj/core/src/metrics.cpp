#include "cellsynth/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <unordered_map>

namespace cellsynth {

namespace {

using Mat = Eigen::MatrixXd;

Mat as_matrix(const std::vector<double>& v, int d) {
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(v.data(), d, d);
}

// Symmetric PSD square root; eigenvalues down to -1e-8 are rounding noise and clip to 0.
Mat sqrt_psd(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    for (int i = 0; i < ev.size(); ++i) {
        if (ev[i] < -1e-8) throw ValidationError("covariance is not positive semidefinite");
        ev[i] = std::sqrt(std::max(0.0, ev[i]));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double seg_score(const LabelMap& pred, const LabelMap& gt) {
    if (pred.width != gt.width || pred.height != gt.height || pred.depth != gt.depth)
        throw InputError("SEG: prediction and ground truth differ in shape");
    std::unordered_map<std::uint16_t, std::size_t> gt_size, pred_size;
    std::unordered_map<std::uint32_t, std::size_t> overlap;
    for (std::size_t i = 0; i < gt.voxels.size(); ++i) {
        const auto g = gt.voxels[i], p = pred.voxels[i];
        if (g) ++gt_size[g];
        if (p) ++pred_size[p];
        if (g && p) ++overlap[(std::uint32_t(g) << 16) | p];
    }
    if (gt_size.empty()) throw UndefinedScoreError("SEG is undefined without ground-truth instances");
    std::map<std::uint16_t, double> best;  // ordered, so the sum is reproducible
    for (const auto& [key, inter] : overlap) {
        const auto g = std::uint16_t(key >> 16), p = std::uint16_t(key & 0xffff);
        const std::size_t r = gt_size[g];
        if (2 * inter > r) best[g] = double(inter) / double(r + pred_size[p] - inter);
    }
    double acc = 0.0;
    for (const auto& [g, v] : best) acc += v;
    return acc / double(gt_size.size());
}

FeatureSet make_feature_set(const std::vector<std::vector<double>>& rows) {
    if (rows.size() < 2) throw InputError("a feature set needs at least two samples");
    FeatureSet fs;
    fs.n = int(rows.size());
    fs.d = int(rows[0].size());
    if (fs.d < 1) throw InputError("features must be non-empty");
    for (const auto& r : rows) {
        if (int(r.size()) != fs.d) throw InputError("feature rows differ in length");
        for (double v : r)
            if (!std::isfinite(v)) throw InputError("non-finite feature value");
        fs.rows.insert(fs.rows.end(), r.begin(), r.end());
    }
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(fs.rows.data(), fs.n,
                                                                                               fs.d);
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Mat centered = x.rowwise() - mu;
    const Mat cov = centered.transpose() * centered / double(fs.n - 1);
    fs.mean.assign(mu.data(), mu.data() + fs.d);
    fs.covariance.resize(std::size_t(fs.d) * fs.d);
    for (int i = 0; i < fs.d; ++i)
        for (int j = 0; j < fs.d; ++j) fs.covariance[std::size_t(i) * fs.d + j] = cov(i, j);
    return fs;
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
    if (a.d != b.d) throw InputError("feature dimensions differ: " + std::to_string(a.d) + " vs " + std::to_string(b.d));
    double mean_term = 0.0;
    for (int i = 0; i < a.d; ++i) {
        const double diff = a.mean[std::size_t(i)] - b.mean[std::size_t(i)];
        mean_term += diff * diff;
    }
    const Mat sa = as_matrix(a.covariance, a.d), sb = as_matrix(b.covariance, b.d);
    // Tr((Sa Sb)^(1/2)) = Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), which stays symmetric.
    const Mat ra = sqrt_psd(sa);
    const double cross = sqrt_psd(ra * sb * ra).trace();
    return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
}

FeatureSet extract_features(const std::vector<GrayImage>& images, const FeatureExtractor& extractor) {
    if (images.empty()) throw InputError("no images to extract features from");
    std::vector<std::vector<double>> rows;
    rows.reserve(images.size());
    for (const auto& img : images) rows.push_back(extractor(img));
    return make_feature_set(rows);
}

FeatureExtractor downsample_extractor(int side) {
    if (side < 1) throw RangeError("feature grid side must be positive");
    return [side](const GrayImage& img) {
        if (img.width < 1 || img.height < 1) throw InputError("cannot extract features from an empty image");
        std::vector<double> sum(std::size_t(side) * side, 0.0), area(std::size_t(side) * side, 0.0);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const std::size_t cell = std::size_t(y * side / img.height) * side + std::size_t(x * side / img.width);
                sum[cell] += img.at(x, y);
                area[cell] += 1.0;
            }
        for (std::size_t i = 0; i < sum.size(); ++i)
            if (area[i] > 0) sum[i] /= area[i];
        return sum;
    };
}

std::string format_records(const std::vector<MetricRecord>& records) {
    std::ostringstream os;
    os << std::setprecision(6);
    for (const auto& r : records) os << r.metric << '\t' << r.dataset << '\t' << r.value << '\n';
    return os.str();
}

std::string format_table(const std::vector<MetricRecord>& records) {
    std::vector<std::string> metrics, datasets;
    std::map<std::pair<std::string, std::string>, double> cell;
    for (const auto& r : records) {
        if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end()) metrics.push_back(r.metric);
        if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
        cell[{r.dataset, r.metric}] = r.value;
    }
    std::ostringstream os;
    os << std::left << std::setw(16) << "dataset";
    for (const auto& m : metrics) os << std::setw(12) << m;
    os << '\n';
    for (const auto& d : datasets) {
        os << std::setw(16) << d;
        for (const auto& m : metrics) {
            auto it = cell.find({d, m});
            std::ostringstream v;
            if (it != cell.end()) v << std::fixed << std::setprecision(4) << it->second;
            else v << "-";
            os << std::setw(12) << v.str();
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace cellsynth
