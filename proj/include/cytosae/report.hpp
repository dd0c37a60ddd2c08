#pragma once

// Grayscale PNG masks for attribution grids and a static HTML page that
// renders exported reference sets. Nothing here computes model quantities.

#include "cytosae/concepts.hpp"

#include <png.h>

namespace cytosae {

// 8-bit grayscale PNG, rows top to bottom.
inline std::vector<std::byte> encode_png_gray(
    const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& px) {
  if (px.rows() == 0 || px.cols() == 0) throw DataError("empty image");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(px.cols());
  img.height = static_cast<png_uint_32>(px.rows());
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, px.data(), 0, nullptr))
    throw Error(std::string("PNG encoding failed: ") + img.message);
  std::vector<std::byte> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr))
    throw Error(std::string("PNG encoding failed: ") + img.message);
  out.resize(size);
  return out;
}

// Grid scaled so its maximum maps to 255 (all-zero grids stay black), each
// patch drawn as a `scale` x `scale` block.
inline std::vector<std::byte> attribution_mask_png(const AttributionGrid& g, std::size_t scale = 14) {
  const double mx = g.grid.size() ? g.grid.maxCoeff() : 0.0;
  const auto n = g.grid.rows() * static_cast<Eigen::Index>(scale);
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> px(n, g.grid.cols() * static_cast<Eigen::Index>(scale));
  for (Eigen::Index r = 0; r < px.rows(); ++r)
    for (Eigen::Index c = 0; c < px.cols(); ++c) {
      const double v = g.grid(r / static_cast<Eigen::Index>(scale), c / static_cast<Eigen::Index>(scale));
      px(r, c) = mx > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v / mx, 0.0, 1.0))) : 0;
    }
  return encode_png_gray(px);
}

inline std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct ReportImage {
  std::string image_id;
  std::uint32_t score = 0;
  std::string mask_href;                  // PNG mask, relative to the report
  std::optional<std::string> image_href;  // source image when the manifest lists one
};

struct ReportLatent {
  std::size_t latent_id = 0;
  std::optional<std::size_t> cluster;
  std::vector<ReportImage> images;
};

// Static page: one row per latent, one tile per reference image. With a
// source image the mask is overlaid on it; otherwise the mask is shown alone.
inline std::string render_report_html(const std::string& title, std::span<const ReportLatent> latents) {
  std::string h;
  h += "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" + html_escape(title) + "</title>\n";
  h += "<style>\nbody{font-family:sans-serif;margin:1em}\n.row{display:flex;flex-wrap:wrap;gap:6px;margin-bottom:1.5em}\n"
       ".tile{position:relative;width:224px;height:224px;background:#000}\n.tile img{position:absolute;left:0;top:0;width:224px;height:224px;image-rendering:pixelated}\n"
       ".tile img.mask.over{opacity:0.55;mix-blend-mode:screen}\n.cap{font-size:11px;width:224px;overflow:hidden}\n</style></head><body>\n";
  h += "<h1>" + html_escape(title) + "</h1>\n";
  for (const auto& l : latents) {
    h += "<h2>latent " + std::to_string(l.latent_id);
    if (l.cluster) h += " (cluster " + std::to_string(*l.cluster) + ")";
    h += "</h2>\n<div class=\"row\">\n";
    if (l.images.empty()) h += "<p>no activating images</p>\n";
    for (const auto& im : l.images) {
      h += "<div><div class=\"tile\">";
      if (im.image_href) h += "<img src=\"" + html_escape(*im.image_href) + "\" alt=\"\">";
      h += "<img class=\"mask" + std::string(im.image_href ? " over" : "") + "\" src=\"" + html_escape(im.mask_href) + "\" alt=\"\">";
      h += "</div><div class=\"cap\">" + html_escape(im.image_id) + " &middot; " + std::to_string(im.score) + " patches</div></div>\n";
    }
    h += "</div>\n";
  }
  h += "</body></html>\n";
  return h;
}

}  // namespace cytosae
